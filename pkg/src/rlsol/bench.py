"""Synthetic non-stationary stream benchmark.

Generates seeded piecewise-stationary regression or rotating-Gaussian
classification streams, runs the configured learners over a sliding
window, and records retention / adaptation errors and forgetting gaps
with per-seed pairing.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, InputError
from .optimizers import (
    EmaConfig,
    GdConfig,
    SlidingWindow,
    bgd_update,
    ema_combine,
    mbsgd_update,
    precond_update_stage,
)
from .rls import RlsConfig, SampleBlock, init_state, rls_block_step

REGRESSION = "piecewise_linear_regression"
CLASSIFICATION = "rotating_gaussian_classification"
_KINDS = (REGRESSION, CLASSIFICATION)

LEARNER_KINDS = ("plain_bgd", "mbsgd", "ema", "rls_precond", "exact_rls")


@dataclass
class Regime:
    """Ground-truth parameters (q, p) and duration in blocks."""

    weight: np.ndarray
    duration: int

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ConfigError(f"regime weight must be 2-D, got shape {self.weight.shape}")
        if self.duration < 1:
            raise ConfigError("regime duration must be at least 1 block")


@dataclass
class DriftScenario:
    kind: str
    input_dim: int
    output_dim: int
    regimes: list[Regime]
    block_size: int
    noise_sigma: float
    seed: int
    holdout_size: int = 256

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.input_dim < 1 or self.output_dim < 1 or self.block_size < 1:
            raise ConfigError("dimensions and block size must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be non-negative")
        if not self.regimes:
            raise ConfigError("at least one regime required")
        for regime in self.regimes:
            if regime.weight.shape != (self.output_dim, self.input_dim):
                raise ConfigError(
                    f"regime weight shape {regime.weight.shape} != "
                    f"({self.output_dim}, {self.input_dim})"
                )

    @property
    def n_blocks(self) -> int:
        return sum(r.duration for r in self.regimes)


def make_regimes(
    rng: np.random.Generator, n_regimes: int, p: int, q: int, duration: int
) -> list[Regime]:
    """Random unit-row ground truths, each regime orthogonalized against
    all previous ones so regime optima are well separated."""
    if n_regimes * q > p:
        raise ConfigError(f"cannot fit {n_regimes} orthogonal regimes of {q} rows in dimension {p}")
    basis: list[np.ndarray] = []
    regimes = []
    for _ in range(n_regimes):
        rows = []
        for _ in range(q):
            v = rng.standard_normal(p)
            for u in basis:
                v -= (v @ u) * u
            v /= np.linalg.norm(v)
            basis.append(v)
            rows.append(v)
        regimes.append(Regime(np.array(rows), duration))
    return regimes


def rotate_means(base: np.ndarray, angle: float) -> np.ndarray:
    """Rotate class means by `angle` in the plane of the first two axes."""
    out = base.copy()
    c, s = np.cos(angle), np.sin(angle)
    x0, x1 = base[:, 0].copy(), base[:, 1].copy()
    out[:, 0] = c * x0 - s * x1
    out[:, 1] = s * x0 + c * x1
    return out


def build_scenario(
    kind: str,
    input_dim: int,
    output_dim: int,
    n_regimes: int,
    regime_blocks: int,
    block_size: int,
    noise_sigma: float,
    seed: int,
    holdout_size: int = 256,
) -> DriftScenario:
    """Scenario with ground truths derived deterministically from the seed.

    Regression regimes get mutually orthogonal unit-row weights; the
    classification ground truth rotates a fixed set of class means by a
    quarter turn per regime.
    """
    rng = np.random.default_rng(seed)
    if kind == REGRESSION:
        regimes = make_regimes(rng, n_regimes, input_dim, output_dim, regime_blocks)
    elif kind == CLASSIFICATION:
        if input_dim < 2:
            raise ConfigError("classification scenarios need input_dim >= 2")
        base = rng.standard_normal((output_dim, input_dim))
        base *= 2.0 / np.linalg.norm(base, axis=1, keepdims=True)
        regimes = [
            Regime(rotate_means(base, r * np.pi / 2.0), regime_blocks)
            for r in range(n_regimes)
        ]
    else:
        raise ConfigError(f"unknown scenario kind {kind!r}")
    return DriftScenario(
        kind=kind,
        input_dim=input_dim,
        output_dim=output_dim,
        regimes=regimes,
        block_size=block_size,
        noise_sigma=noise_sigma,
        seed=seed,
        holdout_size=holdout_size,
    )


@dataclass
class Stream:
    blocks: list[SampleBlock]
    regime_of_block: list[int]
    holdouts: list[SampleBlock]  # one evaluation set per regime
    digest: str


def _digest_blocks(blocks: list[SampleBlock]) -> str:
    h = hashlib.sha256()
    for block in blocks:
        h.update(block.x.tobytes())
        h.update(block.y.tobytes())
    return h.hexdigest()


def _draw(scenario: DriftScenario, rng: np.random.Generator, regime: Regime, n: int):
    p, q = scenario.input_dim, scenario.output_dim
    if scenario.kind == REGRESSION:
        x = rng.standard_normal((n, p))
        y = x @ regime.weight.T + scenario.noise_sigma * rng.standard_normal((n, q))
        return x, y
    labels = rng.integers(0, q, size=n)
    x = regime.weight[labels] + scenario.noise_sigma * rng.standard_normal((n, p))
    y = np.zeros((n, q))
    y[np.arange(n), labels] = 1.0
    return x, y


def generate_stream(scenario: DriftScenario) -> Stream:
    """Deterministic stream: all randomness flows through scenario.seed."""
    rng = np.random.default_rng(scenario.seed)
    blocks, regime_of_block, holdouts = [], [], []
    for r, regime in enumerate(scenario.regimes):
        hx, hy = _draw(scenario, rng, regime, scenario.holdout_size)
        holdouts.append(SampleBlock(x=hx, y=hy))
        for _ in range(regime.duration):
            bx, by = _draw(scenario, rng, regime, scenario.block_size)
            blocks.append(SampleBlock(x=bx, y=by))
            regime_of_block.append(r)
    return Stream(blocks, regime_of_block, holdouts, _digest_blocks(blocks))


def evaluate(w: np.ndarray, holdout: SampleBlock, kind: str) -> float:
    """Mean squared error (regression) or mean softmax cross-entropy."""
    z = holdout.x @ w.T
    if kind == REGRESSION:
        return float(np.mean((holdout.y - z) ** 2))
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    return float(-np.mean(np.sum(holdout.y * logp, axis=1)))


@dataclass
class BenchParams:
    """Learner configuration shared across the paired comparison."""

    window: int = 10
    iterations: int = 5
    lr_bgd: float = 5e-3
    lr_mbsgd: float = 3e-2
    batch_size: int = 8
    ema_inner_lr: float = 5e-3
    rls_beta: float = 0.97
    rls_delta: float = 1.0
    rls_lr: float = 0.06
    weight_decay: float = 0.0
    window_delta: float = 1e-6

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window capacity must be positive")


@dataclass
class LearnerSpec:
    """Parsed learner identifier: kind plus the EMA coefficient if any."""

    name: str
    kind: str
    alpha: float | None = None


def parse_learner_spec(text: str) -> LearnerSpec:
    text = text.strip()
    if text.startswith("ema"):
        alpha = 0.5
        if ":" in text:
            try:
                alpha = float(text.split(":", 1)[1])
            except ValueError as err:
                raise ConfigError(f"bad EMA coefficient in {text!r}") from err
        EmaConfig(alpha)  # range check
        return LearnerSpec(text, "ema", alpha)
    if text not in LEARNER_KINDS:
        raise ConfigError(f"unknown learner {text!r}")
    return LearnerSpec(text, text)


@dataclass
class RunReport:
    learner: str
    kind: str
    stream_digest: str
    adaptation_error: np.ndarray          # (n_blocks,)
    retention_error: np.ndarray           # (n_regimes, n_blocks)
    forgetting_gap: np.ndarray            # (n_regimes, n_blocks)
    wall_ms: float
    diverged_at: int | None = None

    @property
    def n_steps(self) -> int:
        return self.adaptation_error.size


class _Learner:
    """Per-stream learner state: one update per incoming block."""

    def __init__(self, spec: LearnerSpec, scenario: DriftScenario, params: BenchParams):
        p, q = scenario.input_dim, scenario.output_dim
        self.spec = spec
        self.params = params
        self.w = np.zeros((q, p))
        self.window = SlidingWindow(params.window)
        self.window_cfg = RlsConfig(p, q, beta=1.0, delta=params.window_delta)
        self.rls_cfg = RlsConfig(p, q, beta=params.rls_beta, delta=params.rls_delta)
        self.state = init_state(self.rls_cfg)
        self.stream_seed = scenario.seed

    def update(self, block: SampleBlock, step: int) -> None:
        params = self.params
        kind = self.spec.kind
        if kind in ("plain_bgd", "mbsgd", "ema"):
            self.window.push(block)
        if kind == "plain_bgd":
            cfg = GdConfig(params.lr_bgd, params.iterations, params.weight_decay)
            self.w = bgd_update(self.w, self.window, cfg, self.window_cfg)
        elif kind == "mbsgd":
            cfg = GdConfig(params.lr_mbsgd, params.iterations, params.weight_decay)
            seed = (self.stream_seed * 1_000_003 + step) % 2**63
            # early on the window may hold fewer samples than the batch size
            total = sum(b.size for b in self.window.as_list())
            self.w = mbsgd_update(
                self.w, self.window, cfg, min(params.batch_size, total), seed
            )
        elif kind == "ema":
            cfg = GdConfig(params.ema_inner_lr, params.iterations, params.weight_decay)
            w_new = bgd_update(self.w, self.window, cfg, self.window_cfg)
            self.w = ema_combine(self.w, w_new, EmaConfig(self.spec.alpha))
        elif kind == "rls_precond":
            cfg = GdConfig(params.rls_lr, params.iterations, params.weight_decay)
            self.w, self.state = precond_update_stage(self.w, block, self.state, cfg)
        else:  # exact_rls
            self.w, self.state = rls_block_step(self.state, self.w, block)


def run_learner(
    spec: LearnerSpec | str,
    stream: Stream,
    scenario: DriftScenario,
    params: BenchParams | None = None,
) -> RunReport:
    """Feed the stream through one learner and fill the metric record.

    Divergence is recorded in the report (updates stop, errors stay at
    their last values), never raised.
    """
    if isinstance(spec, str):
        spec = parse_learner_spec(spec)
    params = params or BenchParams()
    learner = _Learner(spec, scenario, params)
    n = len(stream.blocks)
    n_regimes = len(stream.holdouts)
    adaptation = np.zeros(n)
    retention = np.zeros((n_regimes, n))
    diverged_at = None
    start = time.perf_counter()
    for step, block in enumerate(stream.blocks):
        if diverged_at is None:
            try:
                learner.update(block, step)
            except DivergenceError:
                diverged_at = step
        for r in range(n_regimes):
            retention[r, step] = evaluate(learner.w, stream.holdouts[r], scenario.kind)
        adaptation[step] = retention[stream.regime_of_block[step], step]
    wall_ms = (time.perf_counter() - start) * 1000.0
    gap = np.zeros_like(retention)
    for r in range(n_regimes):
        ends = [i for i, rb in enumerate(stream.regime_of_block) if rb == r]
        end = ends[-1]
        gap[r, end + 1 :] = retention[r, end + 1 :] - retention[r, end]
    return RunReport(
        learner=spec.name,
        kind=scenario.kind,
        stream_digest=stream.digest,
        adaptation_error=adaptation,
        retention_error=retention,
        forgetting_gap=gap,
        wall_ms=wall_ms,
        diverged_at=diverged_at,
    )


@dataclass
class PairedSummary:
    learners: list[str]
    n_seeds: int
    seeds: list[int]
    stream_digests: list[str]
    win_matrix: np.ndarray            # fraction of seeds learner i beats j
    final_retention: np.ndarray       # (n_learners, n_seeds) regime-1 error at end
    final_adaptation: np.ndarray      # (n_learners, n_seeds) last-regime error at end
    mean_forgetting_gap: np.ndarray   # (n_learners,) regime-1 gap at stream end
    reports: list[list[RunReport]] = field(default_factory=list)  # [seed][learner]


def _run_seed(
    scenario: DriftScenario,
    specs: list[LearnerSpec],
    params: BenchParams,
    seed: int,
) -> tuple[str, list[RunReport]]:
    per_seed = DriftScenario(
        kind=scenario.kind,
        input_dim=scenario.input_dim,
        output_dim=scenario.output_dim,
        regimes=scenario.regimes,
        block_size=scenario.block_size,
        noise_sigma=scenario.noise_sigma,
        seed=seed,
        holdout_size=scenario.holdout_size,
    )
    stream = generate_stream(per_seed)
    return stream.digest, [run_learner(spec, stream, per_seed, params) for spec in specs]


def compare_retention(
    scenario: DriftScenario,
    learner_specs: list[str],
    n_seeds: int,
    params: BenchParams | None = None,
    keep_reports: bool = False,
    threads: int = 1,
) -> PairedSummary:
    """Run every learner on identical per-seed streams and pair the results.

    Wins are counted on end-of-stream retention error for the first
    regime; exact ties break on seed parity. Seeds may run on worker
    threads; results are merged in seed order so output is independent
    of the thread count.
    """
    if len(learner_specs) < 2:
        raise InputError("at least two learners required")
    if n_seeds < 1:
        raise ConfigError("need at least one seed")
    if threads < 1:
        raise ConfigError("thread count must be positive")
    specs = [parse_learner_spec(s) for s in learner_specs]
    params = params or BenchParams()
    n_l = len(specs)
    seeds = [scenario.seed + i for i in range(n_seeds)]
    final_ret = np.zeros((n_l, n_seeds))
    final_adapt = np.zeros((n_l, n_seeds))
    final_gap = np.zeros((n_l, n_seeds))
    digests = []
    all_reports: list[list[RunReport]] = []
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(lambda s: _run_seed(scenario, specs, params, s), seeds)
            )
    else:
        results = [_run_seed(scenario, specs, params, s) for s in seeds]
    for s_idx, (digest, seed_reports) in enumerate(results):
        digests.append(digest)
        for l_idx, report in enumerate(seed_reports):
            final_ret[l_idx, s_idx] = report.retention_error[0, -1]
            final_adapt[l_idx, s_idx] = report.adaptation_error[-1]
            final_gap[l_idx, s_idx] = report.forgetting_gap[0, -1]
        if keep_reports:
            all_reports.append(seed_reports)
    wins = np.zeros((n_l, n_l))
    for i in range(n_l):
        for j in range(n_l):
            if i == j:
                continue
            for s_idx, seed in enumerate(seeds):
                a, b = final_ret[i, s_idx], final_ret[j, s_idx]
                if a < b:
                    wins[i, j] += 1
                elif a == b:
                    # exact tie: even seeds go to the lower index
                    winner = min(i, j) if seed % 2 == 0 else max(i, j)
                    wins[i, j] += 1 if winner == i else 0
    win_matrix = wins / n_seeds
    np.fill_diagonal(win_matrix, 0.5)
    return PairedSummary(
        learners=[s.name for s in specs],
        n_seeds=n_seeds,
        seeds=seeds,
        stream_digests=digests,
        win_matrix=win_matrix,
        final_retention=final_ret,
        final_adaptation=final_adapt,
        mean_forgetting_gap=final_gap.mean(axis=1),
        reports=all_reports,
    )
