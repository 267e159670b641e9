"""Deterministic simulation studies.

Work is split into fixed-size chunks of replications. Every replication
draws from its own counter-based stream, chunk partial sums are reduced with
``math.fsum`` in chunk order, and the chunking depends only on the
configuration, so a study's output is byte-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import asdict, dataclass, field
import io
import json
import math

import numpy as np
from scipy import stats

from . import distributions as dist
from . import rng
from . import theory
from .anova import BalancedData
from .errors import ConfigError, MomentUndefinedError
from .estimators import Method, SpecLimits, beta_factor
from .inference import SIGMA2_U_KINDS, sigma2_u_bounds

STUDIES = ("bias", "se", "estimator", "coverage", "negprob", "convergence")
SAMPLERS = ("data", "sufficient")
TAG_CELL = 5
_DATA_CHUNK_VALUES = 2_000_000
_SUFFICIENT_CHUNK = 1 << 16


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    A study runs over every plan in ``plans``. Coverage studies also run over
    every ``(sigma2_u, sigma2_eps)`` pair in ``scenarios``; estimator and
    negative-probability studies run over ``rho_grid`` with
    ``sigma2_eps`` fixed.
    """

    plans: tuple = ((10, 3),)
    scenarios: tuple = ((1.0, 1.0),)
    sigma2_eps: float = 1.0
    n_reps: int = 500_000
    master_seed: int = 0
    alpha: tuple = (0.05,)
    rho_grid: tuple | None = None
    boundary_threshold: float = 0.01
    ci_kinds: tuple = SIGMA2_U_KINDS
    estimator_methods: tuple = ("anova", "nanova", "mle")
    estimate_source: str = "mle"
    sampler: str | None = None
    spec: tuple | None = None

    @property
    def a(self):
        return self.plans[0][0]

    @property
    def r(self):
        return self.plans[0][1]

    @property
    def sigma2_u(self):
        return self.scenarios[0][0]

    def sampler_for(self, study):
        if self.sampler is not None:
            return self.sampler
        return "data" if study == "coverage" else "sufficient"

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
        return d

    @classmethod
    def from_dict(cls, raw):
        return validate_config(raw)


_FIELDS = {f for f in SimConfig.__dataclass_fields__} | {"a", "r", "sigma2_u"}


def _is_int(v):
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _is_real(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def validate_config(raw):
    """Build a SimConfig from a mapping, collecting every problem before failing."""
    if isinstance(raw, SimConfig):
        raw = raw.to_dict()
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    problems = []
    unknown = sorted(set(raw) - _FIELDS)
    problems += [f"{k}: unknown field" for k in unknown]
    d = {k: v for k, v in raw.items() if k in _FIELDS}

    plans = d.pop("plans", None)
    a, r = d.pop("a", None), d.pop("r", None)
    if plans is None:
        plans = [[a if a is not None else 10, r if r is not None else 3]]
    elif a is not None or r is not None:
        problems.append("a/r: give either a and r or plans, not both")
    clean_plans = []
    if not isinstance(plans, (list, tuple)) or not plans:
        problems.append("plans: must be a non-empty list of [a, r] pairs")
    else:
        for i, p in enumerate(plans):
            if (not isinstance(p, (list, tuple)) or len(p) != 2
                    or not all(_is_int(x) for x in p) or p[0] < 2 or p[1] < 2):
                problems.append(f"plans[{i}]: need integers a >= 2 and r >= 2, got {p!r}")
            else:
                clean_plans.append((int(p[0]), int(p[1])))

    s2e = d.get("sigma2_eps", 1.0)
    if not (_is_real(s2e) and s2e > 0):
        problems.append(f"sigma2_eps: must be > 0, got {s2e!r}")
    scen = d.pop("scenarios", None)
    s2u = d.pop("sigma2_u", None)
    if scen is None:
        scen = [[s2u if s2u is not None else 1.0, s2e]]
    elif s2u is not None:
        problems.append("sigma2_u: give either sigma2_u or scenarios, not both")
    clean_scen = []
    if not isinstance(scen, (list, tuple)) or not scen:
        problems.append("scenarios: must be a non-empty list of [sigma2_u, sigma2_eps] pairs")
    else:
        for i, s in enumerate(scen):
            if (not isinstance(s, (list, tuple)) or len(s) != 2 or not all(_is_real(x) for x in s)
                    or s[0] < 0 or s[1] <= 0):
                problems.append(f"scenarios[{i}]: need sigma2_u >= 0 and sigma2_eps > 0, got {s!r}")
            else:
                clean_scen.append((float(s[0]), float(s[1])))

    n = d.get("n_reps", 500_000)
    if not (_is_int(n) and n >= 1):
        problems.append(f"n_reps: must be an integer >= 1, got {n!r}")
    seed = d.get("master_seed", 0)
    if not (_is_int(seed) and 0 <= seed <= rng.MASK64):
        problems.append(f"master_seed: must be an unsigned 64-bit integer, got {seed!r}")

    alpha = d.get("alpha", (0.05,))
    alphas = alpha if isinstance(alpha, (list, tuple)) else [alpha]
    if not alphas or not all(_is_real(x) and 0 < x < 1 for x in alphas):
        problems.append(f"alpha: must be in (0, 1) (or a list of such), got {alpha!r}")

    grid = d.get("rho_grid")
    if grid is not None:
        if isinstance(grid, dict):
            try:
                grid = theory.rho_grid(grid.get("min", 1.0), grid.get("max", 100.0),
                                       int(grid.get("points", 50)))
            except Exception as exc:  # noqa: BLE001 - reported as a config problem
                problems.append(f"rho_grid: {exc}")
                grid = None
        if grid is not None:
            if (not isinstance(grid, (list, tuple)) or not grid
                    or not all(_is_real(x) and x >= 0 for x in grid)):
                problems.append("rho_grid: must be a non-empty list of non-negative reals")
                grid = None
            elif list(grid) != sorted(grid):
                problems.append("rho_grid: must be sorted ascending")

    thr = d.get("boundary_threshold", 0.01)
    if not (_is_real(thr) and thr >= 0):
        problems.append(f"boundary_threshold: must be >= 0, got {thr!r}")
    kinds = d.get("ci_kinds", SIGMA2_U_KINDS)
    if not isinstance(kinds, (list, tuple)) or not kinds or any(k not in SIGMA2_U_KINDS for k in kinds):
        problems.append(f"ci_kinds: must be a non-empty subset of {list(SIGMA2_U_KINDS)}, got {kinds!r}")
    methods = d.get("estimator_methods", ("anova", "nanova", "mle"))
    try:
        methods = tuple(Method.parse(m).value for m in methods)
        if not methods:
            raise ValueError
    except Exception:  # noqa: BLE001
        problems.append(f"estimator_methods: must be a non-empty subset of anova/nanova/mle, got {methods!r}")
    source = d.get("estimate_source", "mle")
    if source not in ("mle", "nanova", "reml"):
        problems.append(f"estimate_source: must be mle or nanova, got {source!r}")
    sampler = d.get("sampler")
    if sampler is not None and sampler not in SAMPLERS:
        problems.append(f"sampler: must be one of {list(SAMPLERS)}, got {sampler!r}")
    spec = d.get("spec")
    if spec is not None:
        try:
            spec = tuple(float(x) for x in spec)
            SpecLimits(*spec)
        except Exception as exc:  # noqa: BLE001
            problems.append(f"spec: must be [LL, UL] or [LL, UL, kappa] with UL > LL ({exc})")

    if problems:
        raise ConfigError(problems)
    return SimConfig(
        plans=tuple(clean_plans),
        scenarios=tuple(clean_scen),
        sigma2_eps=float(s2e),
        n_reps=int(n),
        master_seed=int(seed),
        alpha=tuple(float(x) for x in alphas),
        rho_grid=None if grid is None else tuple(float(x) for x in grid),
        boundary_threshold=float(thr),
        ci_kinds=tuple(kinds),
        estimator_methods=methods,
        estimate_source="nanova" if source == "reml" else source,
        sampler=sampler,
        spec=spec,
    )


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def cell_seed(master_seed, cell):
    """Seed of an independent family of replication streams."""
    return rng.stream_key(master_seed, cell, tag=TAG_CELL)


def simulate_dataset(config, replication_index, plan=0, scenario=0):
    """The data set of one replication: Y_ij = U_i + e_ij with mu = 0."""
    config = validate_config(config) if not isinstance(config, SimConfig) else config
    a, r = config.plans[plan]
    s2u, s2e = config.scenarios[scenario]
    seed = cell_seed(config.master_seed, plan * len(config.scenarios) + scenario)
    z = rng.normals(rng.stream_keys(seed, [replication_index]), a + a * r)[0]
    return BalancedData(_compose(z[None, :], a, r, s2u, s2e)[0])


def _compose(z, a, r, s2u, s2e):
    u = math.sqrt(s2u) * z[:, :a]
    e = math.sqrt(s2e) * z[:, a:].reshape(-1, a, r)
    return u[:, :, None] + e


def _sums_of_squares_data(seed, idx, a, r, s2u, s2e):
    y = _compose(rng.normals(rng.stream_keys(seed, idx), a + a * r), a, r, s2u, s2e)
    means = y.mean(axis=2)
    grand = means.mean(axis=1)
    ss_u = r * ((means - grand[:, None]) ** 2).sum(axis=1)
    ss_e = ((y - means[:, :, None]) ** 2).sum(axis=(1, 2))
    return ss_u, ss_e


def _chi_pair(seed, idx, a, r):
    x = rng.chi_squares(rng.stream_keys(seed, idx, rng.TAG_GAMMA_U), a - 1)
    y = rng.chi_squares(rng.stream_keys(seed, idx, rng.TAG_GAMMA_E), a * (r - 1))
    return x, y


def _sums_of_squares(sampler, seed, idx, a, r, s2u, s2e):
    if sampler == "data":
        return _sums_of_squares_data(seed, idx, a, r, s2u, s2e)
    x, y = _chi_pair(seed, idx, a, r)
    return (s2e + r * s2u) * x, s2e * y


def _chunk_size(config, study):
    if config.sampler_for(study) == "data":
        width = max(a + a * r for a, r in config.plans)
        return max(1, min(1 << 14, _DATA_CHUNK_VALUES // width))
    return _SUFFICIENT_CHUNK


def _estimates(ss_u, ss_e, a, r, source):
    df_u, df_e = a - 1, a * (r - 1)
    ms_u, ms_e = ss_u / df_u, ss_e / df_e
    if source == "mle":
        beta = a / (a - 1.0)
        s2u = np.maximum(0.0, (ms_u / beta - ms_e) / r)
        s2e = np.minimum((ss_u + ss_e) / (a * r), ms_e)
    else:
        s2u = np.maximum(0.0, (ms_u - ms_e) / r)
        s2e = np.minimum((ss_u + ss_e) / (a * r - 1), ms_e)
    return s2u, s2e


# ---------------------------------------------------------------------------
# chunk kernels (module level so they pickle)
# ---------------------------------------------------------------------------

def _rho_hats(f_ratio, a, r, method):
    if method == "anova":
        return (f_ratio - 1.0) / r
    return np.maximum(0.0, (f_ratio / beta_factor(a, method) - 1.0) / r)


def _kernel_estimator(cfg, plan, chunk):
    a, r = cfg.plans[plan]
    idx = _chunk_indices(cfg, chunk, "estimator")
    seed = cell_seed(cfg.master_seed, plan)
    data = cfg.sampler_for("estimator") == "data"
    if not data:
        x, y = _chi_pair(seed, idx, a, r)
        base = (x / (a - 1)) / (y / (a * (r - 1)))
    grid = cfg.rho_grid
    beta = a / (a - 1.0)
    moments = np.zeros((len(grid), len(cfg.estimator_methods), 4))
    counts = np.zeros((len(grid), 2))
    for i, rho in enumerate(grid):
        if data:
            s2e = cfg.sigma2_eps
            ss_u, ss_e = _sums_of_squares_data(seed, idx, a, r, rho * s2e, s2e)
            f_ratio = (ss_u / (a - 1)) / (ss_e / (a * (r - 1)))
        else:
            f_ratio = (1.0 + r * rho) * base
        counts[i] = ((f_ratio < 1.0).sum(), (f_ratio <= beta).sum())
        for j, m in enumerate(cfg.estimator_methods):
            d = _rho_hats(f_ratio, a, r, m) - rho
            d2 = d * d
            moments[i, j] = (d.sum(), d2.sum(), (d2 * d).sum(), (d2 * d2).sum())
    return {"moments": moments, "counts": counts}


def _kernel_negprob(cfg, plan, chunk):
    out = _kernel_estimator(SimConfig(**{**cfg.__dict__, "estimator_methods": ()}), plan, chunk)
    return {"counts": out["counts"]}


def _kernel_coverage(cfg, cell, chunk):
    n_scen = len(cfg.scenarios)
    plan, scen = divmod(cell, n_scen)
    a, r = cfg.plans[plan]
    s2u, s2e = cfg.scenarios[scen]
    idx = _chunk_indices(cfg, chunk, "coverage")
    ss_u, ss_e = _sums_of_squares(cfg.sampler_for("coverage"), cell_seed(cfg.master_seed, cell),
                                  idx, a, r, s2u, s2e)
    est_u, est_e = _estimates(ss_u, ss_e, a, r, cfg.estimate_source)
    df_u, df_e = a - 1, a * (r - 1)
    f_ratio = (ss_u / df_u) / (ss_e / df_e)
    rho = s2u / s2e
    out = {"below": np.array([(est_u < cfg.boundary_threshold).sum()], dtype=float)}
    # per alpha: for each sigma2_u kind (cover, valid, width, width^2)
    approx = np.zeros((len(cfg.alpha), len(cfg.ci_kinds), 4))
    exact = np.zeros((len(cfg.alpha), len(EXACT_METRICS)))
    for ia, alpha in enumerate(cfg.alpha):
        for ik, kind in enumerate(cfg.ci_kinds):
            lo, hi = sigma2_u_bounds(kind, est_u, est_e, a, r, alpha, cfg.boundary_threshold)
            valid = ~np.isnan(lo)
            cover = valid & (lo <= s2u) & (s2u <= hi)
            w = np.where(valid, hi - lo, 0.0)
            approx[ia, ik] = (cover.sum(), valid.sum(), w.sum(), (w * w).sum())
        c_lo, c_hi = dist.chi2_quantile(alpha / 2, df_e), dist.chi2_quantile(1 - alpha / 2, df_e)
        e_lo, e_hi = ss_e / c_hi, ss_e / c_lo
        f_lo, f_hi = dist.f_quantile(alpha / 2, df_u, df_e), dist.f_quantile(1 - alpha / 2, df_u, df_e)
        r_lo, r_hi = (f_ratio / f_hi - 1.0) / r, (f_ratio / f_lo - 1.0) / r
        t_lo, t_hi = np.maximum(r_lo, 0.0), np.maximum(r_hi, 0.0)
        hits = {
            "sigma2_eps_exact": (e_lo <= s2e) & (s2e <= e_hi),
            "rho_exact": (r_lo <= rho) & (rho <= r_hi),
            "rho_exact_truncated": (t_lo <= rho) & (rho <= t_hi),
            "rr_exact": _in(100.0 / np.sqrt(1.0 + t_hi), 100.0 / math.sqrt(1.0 + rho),
                            100.0 / np.sqrt(1.0 + t_lo)),
            "snr_exact": _in(np.sqrt(t_lo), math.sqrt(rho), np.sqrt(t_hi)),
            "icc_exact": _in(t_lo / (1.0 + t_lo), rho / (1.0 + rho), t_hi / (1.0 + t_hi)),
        }
        if cfg.spec is not None:
            spec = SpecLimits(*cfg.spec)
            k = spec.kappa / spec.width
            hits["ptr_exact"] = _in(k * np.sqrt(e_lo), k * math.sqrt(s2e), k * np.sqrt(e_hi))
        else:
            hits["ptr_exact"] = np.zeros(0, dtype=bool)
        exact[ia] = [hits[m].sum() for m in EXACT_METRICS]
    out["approx"] = approx
    out["exact"] = exact
    return out


EXACT_METRICS = ("sigma2_eps_exact", "ptr_exact", "rho_exact", "rho_exact_truncated",
                 "rr_exact", "snr_exact", "icc_exact")


def _in(lo, x, hi):
    return (lo <= x) & (x <= hi)


def _kernel_convergence(cfg, plan, chunk):
    a, r = cfg.plans[plan]
    s2u, s2e = cfg.scenarios[0]
    idx = _chunk_indices(cfg, chunk, "convergence")
    ss_u, ss_e = _sums_of_squares(cfg.sampler_for("convergence"), cell_seed(cfg.master_seed, plan),
                                  idx, a, r, s2u, s2e)
    est_u, est_e = _estimates(ss_u, ss_e, a, r, "mle")
    rho = s2u / s2e
    beta = a / (a - 1.0)
    f_ratio = (ss_u / (a - 1)) / (ss_e / (a * (r - 1)))
    rho_hat = np.maximum(0.0, (f_ratio / beta - 1.0) / r)
    out = {"boundary": np.array([(f_ratio <= beta).sum()], dtype=float)}
    if rho > 0:
        out["z_rho"] = math.sqrt(a) * (rho_hat - rho) / math.sqrt(theory.sigma2_rho(rho, r))
        out["w_vc"] = a * est_u / s2u
    return out


_KERNELS = {
    "estimator": _kernel_estimator,
    "negprob": _kernel_negprob,
    "coverage": _kernel_coverage,
    "convergence": _kernel_convergence,
}


def _chunk_indices(cfg, chunk, study):
    size = _chunk_size(cfg, "estimator" if study == "negprob" else study)
    start = chunk * size
    return np.arange(start, min(start + size, cfg.n_reps), dtype=np.uint64)


def _run_task(args):
    study, cfg, cell, chunk = args
    return (cell, chunk), _KERNELS[study](cfg, cell, chunk)


def _execute(study, cfg, n_cells, workers):
    size = _chunk_size(cfg, study)
    n_chunks = -(-cfg.n_reps // size)
    tasks = [(study, cfg, cell, c) for cell in range(n_cells) for c in range(n_chunks)]
    if workers and workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(_run_task, tasks, chunksize=1))
    else:
        results = dict(map(_run_task, tasks))
    per_cell = []
    for cell in range(n_cells):
        parts = [results[cell, c] for c in range(n_chunks)]
        per_cell.append(parts)
    return per_cell


def _reduce_sum(parts, key):
    """Sum ``parts[i][key]`` arrays element-wise with fsum in chunk order."""
    stack = np.stack([p[key] for p in parts])
    flat = stack.reshape(len(parts), -1)
    out = np.array([math.fsum(flat[:, j].tolist()) for j in range(flat.shape[1])])
    return out.reshape(stack.shape[1:])


def _concat(parts, key):
    return np.concatenate([p[key] for p in parts])


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("study", "a", "r", "sigma2_u", "sigma2_eps", "rho", "alpha", "method",
               "metric", "value", "mc_se", "theory", "n")


@dataclass
class SimSummary:
    study: str
    config: SimConfig
    rows: list = field(default_factory=list)

    def add(self, **kw):
        row = {c: None for c in CSV_COLUMNS}
        row["study"] = self.study
        row.update(kw)
        self.rows.append(row)

    def find(self, **kw):
        """Rows whose fields equal the given values (floats compared exactly)."""
        return [row for row in self.rows if all(row.get(k) == v for k, v in kw.items())]

    def get(self, **kw):
        hits = self.find(**kw)
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {kw}")
        return hits[0]

    def to_dict(self):
        return {"study": self.study, "config": self.config.to_dict(), "rows": self.rows}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False,
                          default=_json_default) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
        return buf.getvalue()


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "NA"
        return format(v, ".17g")
    return str(v)


def _clean(v):
    v = float(v)
    return None if math.isnan(v) else v


def _binom(k, n):
    p = k / n if n else math.nan
    return p, math.sqrt(p * (1 - p) / n) if n else math.nan


def _safe(fn, *args):
    try:
        return fn(*args)
    except MomentUndefinedError:
        return None


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def run_estimator_study(config, workers=1):
    """Relative bias and relative SE of rho_hat per grid point and method.

    Each plan uses one set of replications for the whole rho grid (common
    random numbers), drawn from the exact chi-square laws of SS_u and SS_eps.
    """
    cfg = validate_config(config) if not isinstance(config, SimConfig) else config
    if cfg.rho_grid is None:
        raise ConfigError(["rho_grid: required for the estimator study"])
    per_cell = _execute("estimator", cfg, len(cfg.plans), workers)
    summary = SimSummary("estimator", cfg)
    n = cfg.n_reps
    for plan, parts in enumerate(per_cell):
        a, r = cfg.plans[plan]
        moments = _reduce_sum(parts, "moments") / n
        counts = _reduce_sum(parts, "counts")
        for i, rho in enumerate(cfg.rho_grid):
            truth = theory.ModelTruth.from_rho(a, r, rho, cfg.sigma2_eps)
            base = dict(a=a, r=r, sigma2_u=rho * cfg.sigma2_eps, sigma2_eps=cfg.sigma2_eps, rho=rho, n=n)
            for j, m in enumerate(cfg.estimator_methods):
                m1, m2, m3, m4 = moments[i, j]
                var = max(m2 - m1 * m1, 0.0)
                c4 = m4 - 4 * m1 * m3 + 6 * m1 * m1 * m2 - 3 * m1 ** 4
                sd = math.sqrt(var)
                se_sd = math.sqrt(max(c4 - var * var, 0.0) / n) / (2 * sd) if sd > 0 else 0.0
                scale = 100.0 / rho if rho > 0 else 1.0
                rb = _safe(theory.relative_bias, truth, m)
                rs = _safe(theory.relative_se, truth, m)
                summary.add(**base, method=m, metric="mean", value=rho + m1,
                            mc_se=math.sqrt(var / n), theory=_safe(theory.mean_rho, truth, m))
                summary.add(**base, method=m, metric="relative_bias_pct" if rho > 0 else "bias",
                            value=scale * m1, mc_se=scale * math.sqrt(var / n),
                            theory=None if rb is None else rb.value)
                summary.add(**base, method=m, metric="relative_se_pct" if rho > 0 else "se",
                            value=scale * sd, mc_se=scale * se_sd,
                            theory=None if rs is None else rs.value)
            for k, (method, th) in enumerate((("anova", theory.prob_negative_anova(truth)),
                                               ("mle", theory.prob_boundary(truth, "mle")))):
                p, se = _binom(counts[i, k], n)
                summary.add(**base, method=method,
                            metric="prob_negative" if k == 0 else "prob_boundary",
                            value=p, mc_se=se, theory=th)
    return summary


def run_negative_prob_study(config, workers=1):
    """Empirical Pr(MS_u < MS_eps) and MLE boundary frequency next to their exact values."""
    cfg = validate_config(config) if not isinstance(config, SimConfig) else config
    if cfg.rho_grid is None:
        raise ConfigError(["rho_grid: required for the negative-probability study"])
    per_cell = _execute("negprob", cfg, len(cfg.plans), workers)
    summary = SimSummary("negprob", cfg)
    n = cfg.n_reps
    for plan, parts in enumerate(per_cell):
        a, r = cfg.plans[plan]
        counts = _reduce_sum(parts, "counts")
        for i, rho in enumerate(cfg.rho_grid):
            truth = theory.ModelTruth.from_rho(a, r, rho, cfg.sigma2_eps)
            base = dict(a=a, r=r, sigma2_u=rho * cfg.sigma2_eps, sigma2_eps=cfg.sigma2_eps, rho=rho, n=n)
            p, se = _binom(counts[i, 0], n)
            summary.add(**base, method="anova", metric="prob_negative", value=p, mc_se=se,
                        theory=theory.prob_negative_anova(truth))
            p, se = _binom(counts[i, 1], n)
            summary.add(**base, method="mle", metric="prob_boundary", value=p, mc_se=se,
                        theory=theory.prob_boundary(truth, "mle"))
    return summary


def run_coverage_study(config, workers=1):
    """Coverage and mean width of every interval over all plans x scenarios x alphas."""
    cfg = validate_config(config) if not isinstance(config, SimConfig) else config
    n_scen = len(cfg.scenarios)
    per_cell = _execute("coverage", cfg, len(cfg.plans) * n_scen, workers)
    summary = SimSummary("coverage", cfg)
    n = cfg.n_reps
    for cell, parts in enumerate(per_cell):
        plan, scen = divmod(cell, n_scen)
        a, r = cfg.plans[plan]
        s2u, s2e = cfg.scenarios[scen]
        base = dict(a=a, r=r, sigma2_u=s2u, sigma2_eps=s2e, rho=s2u / s2e, n=n)
        below = _reduce_sum(parts, "below")[0]
        p, se = _binom(below, n)
        summary.add(**base, method=cfg.estimate_source, metric="prob_sigma2_u_below_threshold",
                    value=p, mc_se=se)
        approx = _reduce_sum(parts, "approx")
        exact = _reduce_sum(parts, "exact")
        for ia, alpha in enumerate(cfg.alpha):
            for ik, kind in enumerate(cfg.ci_kinds):
                cover, valid, wsum, w2sum = approx[ia, ik]
                p, se = _binom(cover, valid)
                mean_w = wsum / valid if valid else math.nan
                sd_w = math.sqrt(max(w2sum / valid - mean_w ** 2, 0.0)) if valid else math.nan
                row = dict(base, alpha=alpha, method=f"sigma2_u_{kind}", n=int(valid))
                summary.add(**row, metric="coverage", value=_clean(p), mc_se=_clean(se),
                            theory=1 - alpha)
                summary.add(**row, metric="mean_width", value=_clean(mean_w),
                            mc_se=_clean(sd_w / math.sqrt(valid)) if valid else None)
                summary.add(**row, metric="valid_count", value=float(valid))
            for im, metric in enumerate(EXACT_METRICS):
                if metric == "ptr_exact" and cfg.spec is None:
                    continue
                p, se = _binom(exact[ia, im], n)
                summary.add(**base, alpha=alpha, method=metric, metric="coverage",
                            value=p, mc_se=se, theory=1 - alpha)
    return summary


def run_convergence_study(config, workers=1):
    """KS tests of the standardized MLE estimates against their limiting laws.

    For each plan: sqrt(a)(rho_hat - rho)/sigma_rho against N(0, 1), once with
    the reference sigma_rho and once with the delta-method value, and
    a sigma2_u_hat / sigma2_u against chi2(a - 1), plus the boundary frequency.
    """
    cfg = validate_config(config) if not isinstance(config, SimConfig) else config
    per_cell = _execute("convergence", cfg, len(cfg.plans), workers)
    summary = SimSummary("convergence", cfg)
    n = cfg.n_reps
    s2u, s2e = cfg.scenarios[0]
    for plan, parts in enumerate(per_cell):
        a, r = cfg.plans[plan]
        truth = theory.ModelTruth(a, r, s2u, s2e)
        base = dict(a=a, r=r, sigma2_u=s2u, sigma2_eps=s2e, rho=s2u / s2e, n=n)
        p, se = _binom(_reduce_sum(parts, "boundary")[0], n)
        summary.add(**base, method="mle", metric="prob_boundary", value=p, mc_se=se,
                    theory=theory.prob_boundary(truth, "mle"))
        if s2u > 0:
            z = _concat(parts, "z_rho")
            ks = stats.kstest(z, "norm")
            summary.add(**base, method="mle", metric="ks_stat_rho_normal", value=float(ks.statistic))
            summary.add(**base, method="mle", metric="ks_pvalue_rho_normal", value=float(ks.pvalue))
            rho = s2u / s2e
            z = z * math.sqrt(theory.sigma2_rho(rho, r) / theory.sigma2_rho_delta(rho, r))
            ks = stats.kstest(z, "norm")
            summary.add(**base, method="mle", metric="ks_stat_rho_normal_delta", value=float(ks.statistic))
            summary.add(**base, method="mle", metric="ks_pvalue_rho_normal_delta", value=float(ks.pvalue))
            w = _concat(parts, "w_vc")
            ks = stats.kstest(w, "chi2", args=(a - 1,))
            summary.add(**base, method="mle", metric="ks_stat_vc_chi2", value=float(ks.statistic))
            summary.add(**base, method="mle", metric="ks_pvalue_vc_chi2", value=float(ks.pvalue))
    return summary


def run_study(study, config, workers=1):
    if study in ("bias", "se", "estimator"):
        return run_estimator_study(config, workers)
    if study == "coverage":
        return run_coverage_study(config, workers)
    if study == "negprob":
        return run_negative_prob_study(config, workers)
    if study == "convergence":
        return run_convergence_study(config, workers)
    raise ConfigError([f"study: expected one of {list(STUDIES)}, got {study!r}"])
