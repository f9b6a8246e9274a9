"""Command-line interface.

Subcommands:
  verify     run the oracle-equivalence and identity suites
  bench run  execute a configured drift experiment, write CSV/JSON reports
  demo rls   print an annotated 20-step recursion trace

Exit codes: 0 success, 1 verification failure, 2 configuration errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import bench
from .conv import ConvLayer, FeatureMap, conv_forward
from .errors import ConfigError, RlsolError
from .mlp import CE_HEAD, Layer, MlpModel, forward, head_gradient, softmax
from .rls import (
    RlsConfig,
    SampleBlock,
    batch_solve,
    block_virtual_input,
    gain_vector,
    init_state,
    rls_step,
    update_precision,
)

# Typed schema for the flat key=value config format. Unknown keys are
# hard errors so typos never pass silently.
_CONFIG_SCHEMA = {
    "kind": str,
    "input_dim": int,
    "output_dim": int,
    "n_regimes": int,
    "regime_blocks": int,
    "block_size": int,
    "holdout_size": int,
    "noise_sigma": float,
    "seed": int,
    "n_seeds": int,
    "learners": str,
    "window": int,
    "iterations": int,
    "batch_size": int,
    "lr_bgd": float,
    "lr_mbsgd": float,
    "ema_inner_lr": float,
    "rls_beta": float,
    "rls_delta": float,
    "rls_lr": float,
    "weight_decay": float,
    "window_delta": float,
}

_CONFIG_DEFAULTS = {
    "kind": bench.REGRESSION,
    "input_dim": 16,
    "output_dim": 1,
    "n_regimes": 2,
    "regime_blocks": 60,
    "block_size": 8,
    "holdout_size": 256,
    "noise_sigma": 0.05,
    "seed": 1,
    "n_seeds": 50,
    "learners": "rls_precond,plain_bgd",
    "window": 10,
    "iterations": 5,
    "batch_size": 8,
    "lr_bgd": 5e-3,
    "lr_mbsgd": 3e-2,
    "ema_inner_lr": 5e-3,
    "rls_beta": 0.97,
    "rls_delta": 1.0,
    "rls_lr": 0.06,
    "weight_decay": 0.0,
    "window_delta": 1e-6,
}

DEFAULT_CONFIG = Path(__file__).parent / "data" / "canonical.cfg"


def parse_config(path) -> dict:
    """Flat key=value file: comments start with '#', keys are typed,
    unknown keys raise a ConfigError naming the key."""
    values = dict(_CONFIG_DEFAULTS)
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_SCHEMA[key](value)
        except ValueError as err:
            raise ConfigError(
                f"{path}:{lineno}: bad value for {key!r}: {value!r}"
            ) from err
    return values


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


# --- verify ------------------------------------------------------------


def _check_recursive_batch(rng) -> bool:
    for _ in range(3):
        cfg = RlsConfig(6, 2, beta=float(rng.choice([0.9, 1.0])), delta=0.5)
        state = init_state(cfg)
        w = np.zeros((2, 6))
        blocks = []
        for _ in range(100):
            block = SampleBlock(x=rng.standard_normal((1, 6)), y=rng.standard_normal((1, 2)))
            blocks.append(block)
            w, state = rls_step(state, w, block.x[0], block.y[0])
            ref = batch_solve(blocks, cfg)
            if np.linalg.norm(w - ref) > 1e-8 * (1 + np.linalg.norm(ref)):
                return False
    return True


def _check_sherman_morrison(rng) -> bool:
    cfg = RlsConfig(8, 1, beta=0.98, delta=0.3)
    state = init_state(cfg)
    phi = cfg.delta * np.eye(8)
    for _ in range(1000):
        x = rng.standard_normal(8)
        state = update_precision(state, x)
        phi = cfg.beta * phi + np.outer(x, x)
        if np.linalg.norm(state.p_mat @ phi - np.eye(8)) > 1e-8:
            return False
    return True


def _check_gain_identity(rng) -> bool:
    cfg = RlsConfig(5, 1, beta=0.95, delta=1.0)
    state = init_state(cfg)
    for _ in range(200):
        x = rng.standard_normal(5)
        k = gain_vector(state, x)
        state = update_precision(state, x)
        if np.max(np.abs(k - x @ state.p_mat)) > 1e-10:
            return False
    return True


def _check_virtual_bound(rng) -> bool:
    for _ in range(200):
        b = int(rng.integers(2, 12))
        block = SampleBlock(x=rng.standard_normal((b, 4)), y=rng.standard_normal((b, 2)))
        w = rng.standard_normal((2, 4))
        x_bar, y_bar = block_virtual_input(block)
        lhs = np.sum((y_bar - w @ x_bar) ** 2)
        rhs = np.sum((block.y - block.x @ w.T) ** 2) / b
        if lhs > rhs + 1e-12:
            return False
    return True


def _check_conv_lowering(rng) -> bool:
    for _ in range(20):
        c = int(rng.integers(1, 4))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(kh, kh + 4)), int(rng.integers(kw, kw + 4))
        fm = FeatureMap(rng.standard_normal((c, h, w)))
        layer = ConvLayer(rng.standard_normal((c, kh, kw)))
        out = conv_forward(fm, layer)
        # direct nested-loop convolution
        ref = np.zeros_like(out)
        for i in range(ref.shape[0]):
            for j in range(ref.shape[1]):
                ref[i, j] = np.sum(fm.data[:, i : i + kh, j : j + kw] * layer.kernel)
        if np.max(np.abs(out - ref)) > 1e-10:
            return False
    return True


def _check_ce_head(rng) -> bool:
    for _ in range(100):
        q = int(rng.integers(2, 6))
        model = MlpModel([Layer(np.eye(q))], head=CE_HEAD)
        z, _ = forward(model, rng.standard_normal(q))
        y = np.zeros(q)
        y[int(rng.integers(0, q))] = 1.0
        if np.max(np.abs(head_gradient(model, z, y) - (softmax(z) - y))) > 1e-10:
            return False
    return True


_VERIFY_CHECKS = [
    ("recursive-batch equivalence", _check_recursive_batch),
    ("sherman-morrison consistency", _check_sherman_morrison),
    ("gain identity", _check_gain_identity),
    ("virtual-input bound", _check_virtual_bound),
    ("conv lowering equivalence", _check_conv_lowering),
    ("cross-entropy head identity", _check_ce_head),
]


def cmd_verify(args) -> int:
    failures = 0
    for name, check in _VERIFY_CHECKS:
        ok = check(np.random.default_rng(12345))
        print(f"{name:32s} {'pass' if ok else 'FAIL'}")
        failures += 0 if ok else 1
    print(f"{len(_VERIFY_CHECKS) - failures}/{len(_VERIFY_CHECKS)} checks passed")
    return 0 if failures == 0 else 1


# --- bench run ---------------------------------------------------------


def _scenario_from_config(cfg: dict) -> bench.DriftScenario:
    return bench.build_scenario(
        kind=cfg["kind"],
        input_dim=cfg["input_dim"],
        output_dim=cfg["output_dim"],
        n_regimes=cfg["n_regimes"],
        regime_blocks=cfg["regime_blocks"],
        block_size=cfg["block_size"],
        noise_sigma=cfg["noise_sigma"],
        seed=cfg["seed"],
        holdout_size=cfg["holdout_size"],
    )


def _params_from_config(cfg: dict) -> bench.BenchParams:
    return bench.BenchParams(
        window=cfg["window"],
        iterations=cfg["iterations"],
        lr_bgd=cfg["lr_bgd"],
        lr_mbsgd=cfg["lr_mbsgd"],
        batch_size=cfg["batch_size"],
        ema_inner_lr=cfg["ema_inner_lr"],
        rls_beta=cfg["rls_beta"],
        rls_delta=cfg["rls_delta"],
        rls_lr=cfg["rls_lr"],
        weight_decay=cfg["weight_decay"],
        window_delta=cfg["window_delta"],
    )


def _write_csv(path: Path, summary: bench.PairedSummary, n_regimes: int, timing: bool) -> None:
    header = ["seed", "learner", "step", "adaptation_error"]
    header += [f"retention_error_regime{r + 1}" for r in range(n_regimes)]
    header += ["forgetting_gap", "wall_ms"]
    lines = [",".join(header)]
    for s_idx, seed in enumerate(summary.seeds):
        for report in summary.reports[s_idx]:
            wall = report.wall_ms if timing else 0.0
            for step in range(report.n_steps):
                row = [str(seed), report.learner, str(step), _fmt(report.adaptation_error[step])]
                row += [_fmt(report.retention_error[r, step]) for r in range(n_regimes)]
                row += [_fmt(report.forgetting_gap[0, step]), _fmt(wall)]
                lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def _write_json(path: Path, summary: bench.PairedSummary, cfg_digest: str) -> None:
    try:
        version = metadata.version("rlsol")
    except metadata.PackageNotFoundError:
        version = "unknown"
    summaries = {}
    for l_idx, learner in enumerate(summary.learners):
        diverged = sum(
            1
            for seed_reports in summary.reports
            for report in [seed_reports[l_idx]]
            if report.diverged_at is not None
        ) if summary.reports else 0
        summaries[learner] = {
            "mean_final_retention_regime1": float(summary.final_retention[l_idx].mean()),
            "mean_final_adaptation": float(summary.final_adaptation[l_idx].mean()),
            "mean_forgetting_gap_regime1": float(summary.mean_forgetting_gap[l_idx]),
            "n_diverged": diverged,
        }
    win_rates = {
        li: {
            lj: float(summary.win_matrix[i, j])
            for j, lj in enumerate(summary.learners)
        }
        for i, li in enumerate(summary.learners)
    }
    report = {
        "metadata": {
            "config_digest": cfg_digest,
            "package_version": version,
            "n_seeds": summary.n_seeds,
            "learners": summary.learners,
        },
        "stream_digests": summary.stream_digests,
        "summaries": summaries,
        "win_rate_matrix": win_rates,
    }
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def cmd_bench_run(args) -> int:
    config_path = Path(args.config) if args.config else DEFAULT_CONFIG
    cfg = parse_config(config_path)
    if args.seeds is not None:
        cfg["n_seeds"] = args.seeds
    scenario = _scenario_from_config(cfg)
    params = _params_from_config(cfg)
    learners = [s.strip() for s in cfg["learners"].split(",") if s.strip()]
    summary = bench.compare_retention(
        scenario,
        learners,
        cfg["n_seeds"],
        params,
        keep_reports=True,
        threads=args.threads,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_digest = hashlib.sha256(config_path.read_bytes()).hexdigest()
    n_regimes = cfg["n_regimes"]
    if args.format in ("csv", "both"):
        _write_csv(out_dir / "report.csv", summary, n_regimes, args.timing)
    if args.format in ("json", "both"):
        _write_json(out_dir / "report.json", summary, cfg_digest)
    for i, li in enumerate(summary.learners):
        for j, lj in enumerate(summary.learners):
            if i < j:
                rate = summary.win_matrix[i, j]
                print(f"{li} beats {lj} on regime-1 retention in {_fmt(100 * rate)}% of seeds")
    return 0


# --- demo --------------------------------------------------------------


def cmd_demo_rls(args) -> int:
    rng = np.random.default_rng(7)
    cfg = RlsConfig(input_dim=3, output_dim=1, beta=1.0, delta=1.0)
    w_true = np.array([[1.5, -2.0, 0.5]])
    state = init_state(cfg)
    w = np.zeros((1, 3))
    print("20-step recursive estimation of a fixed 1x3 map (no noise)")
    print(f"ground truth: {np.array2string(w_true[0], precision=4)}")
    print(f"{'step':>4s} {'residual':>12s} {'|W - W*|':>12s}  estimate")
    for t in range(1, 21):
        x = rng.standard_normal(3)
        y = w_true @ x
        residual = float((w @ x - y)[0])
        w, state = rls_step(state, w, x, y)
        err = float(np.linalg.norm(w - w_true))
        print(
            f"{t:4d} {residual:12.6f} {err:12.6f}  "
            f"{np.array2string(w[0], precision=4, suppress_small=True)}"
        )
    print("estimate converges to the ground truth as the regularizer washes out")
    return 0


# --- entry point -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlsol",
        description="recursive least-squares aided online learning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("verify", help="run the oracle and identity suites")

    p_bench = sub.add_parser("bench", help="drift benchmark commands")
    bench_sub = p_bench.add_subparsers(dest="bench_command", required=True)
    p_run = bench_sub.add_parser("run", help="run a configured experiment")
    p_run.add_argument("--config", help="path to a key=value config file")
    p_run.add_argument("--seeds", type=int, default=None, help="override n_seeds")
    p_run.add_argument("--out", default="bench_out", help="output directory")
    p_run.add_argument("--format", choices=["csv", "json", "both"], default="both")
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument(
        "--timing", action="store_true", help="record wall times (breaks byte determinism)"
    )

    p_demo = sub.add_parser("demo", help="annotated demonstrations")
    demo_sub = p_demo.add_subparsers(dest="demo_command", required=True)
    demo_sub.add_parser("rls", help="20-step recursion trace")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse exits 2 on usage errors and 0 on --help; pass through
        return int(err.code or 0)
    try:
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "bench":
            return cmd_bench_run(args)
        return cmd_demo_rls(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except RlsolError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
