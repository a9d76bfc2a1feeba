"""Command-line driver: train, encode, reconstruct, sample, inspect, gradcheck, oracle.

Settings come from a flat ``key = value`` file (``--config``) overridden by
command-line flags, one per key. Unknown keys are errors. Defaults reproduce
the published MNIST run (K=75, M=256, sigma=10, c=1e15, batch 200, 10000 iterations).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checks
from .dataio import (
    Checkpoint,
    Dataset,
    atomic_write_text,
    export_factor_sharing,
    export_figures,
    export_pi_trace,
    export_reconstructions,
    export_top_bits,
    load_checkpoint,
    load_data,
    read_pi_trace,
    save_checkpoint,
    save_matrix_csv,
)
from .errors import BPDCError, ConfigError, NumericError
from .inference import sparse_code_batch
from .mathcore import Rng
from .model import HyperParams, ModelState, sample_dataset
from .training import METRICS_HEADER, TrainConfig, TrainState, fit, format_metrics_row

log = logging.getLogger("bpdc")


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if str(text).strip().lower() in ("", "none", "0") else int(text)


def _dims(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


# key -> (parser, default)
SCHEMA = {
    # model
    "alpha": (float, 1.0),
    "gamma": (float, 1.0),
    "sigma2": (float, 100.0),
    "c": (float, 1e15),
    "K": (int, 75),
    "M": (int, 256),
    "D": (int, 784),
    "L_max": (_opt_int, None),
    "prune_threshold": (float, 1e-3),
    "nonneg_dict": (_bool, False),
    "hidden": (_dims, (100, 100)),
    "activation": (str, "tanh"),
    # training
    "batch_size": (int, 200),
    "n_iters": (int, 10000),
    "tau0": (float, 100.0),
    "kappa": (float, 0.6),
    "adam_stepsize": (float, 1e-3),
    "seed": (int, 0),
    "log_every": (int, 10),
    "checkpoint_every": (int, 0),
    # paths and data
    "data": (str, None),
    "labels": (str, None),
    "scaling": (str, "raw"),
    "checkpoint": (str, None),
    "resume": (str, None),
    "out_dir": (str, "out"),
    "trace": (str, None),
    # exports
    "export_figures": (_bool, False),
    "n_recon": (int, 10),
    "n_samples": (int, 1000),
    "c_sample": (float, 1.0),
}

ALIASES = {"out": "out_dir", "iters": "n_iters"}


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def hyper(self, D: int | None = None) -> HyperParams:
        v = self.values
        return HyperParams(alpha=v["alpha"], gamma=v["gamma"], sigma2=v["sigma2"], c=v["c"], K=v["K"], M=v["M"],
                           D=v["D"] if D is None else D, L_max=v["L_max"], prune_threshold=v["prune_threshold"],
                           nonneg_dict=v["nonneg_dict"])

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(batch_size=v["batch_size"], n_iters=v["n_iters"], tau0=v["tau0"], kappa=v["kappa"],
                           adam_stepsize=v["adam_stepsize"], seed=v["seed"], log_every=v["log_every"])


def parse_config_text(text: str, source: str = "<config>") -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return raw


def build_config(file_values: dict, overrides: dict) -> RunConfig:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    for source in (file_values, overrides):
        for key, text in source.items():
            key = ALIASES.get(key, key)
            if key not in SCHEMA:
                raise ConfigError(f"unknown configuration key {key!r}")
            try:
                values[key] = SCHEMA[key][0](text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
    if values["scaling"] not in ("unit_interval", "zero_mean", "raw"):
        raise ConfigError(f"unknown scaling {values['scaling']!r}")
    return RunConfig(values)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    common.add_argument("-v", "--verbose", action="store_true")
    for key in SCHEMA:
        common.add_argument(f"--{key}", dest=f"cfg_{key}", metavar="VALUE")
    common.add_argument("--out", dest="cfg_out_dir", metavar="DIR")
    common.add_argument("--iters", dest="cfg_n_iters", metavar="N")
    p = argparse.ArgumentParser(prog="bpdc", description="Deep beta-process dictionary learning")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in [
        ("train", "fit a model with stochastic MAP-EM"),
        ("encode", "greedy sparse codes for a dataset"),
        ("reconstruct", "reconstruction images and CSV"),
        ("sample", "draw a synthetic dataset"),
        ("inspect", "E[pi] table, factor sharing and top-bit outputs"),
        ("gradcheck", "finite-difference check of the theta gradient"),
        ("oracle", "greedy-vs-exhaustive and conjugacy self-checks"),
    ]:
        sub.add_parser(name, parents=[common], help=text)
    return p


def load_run_config(args) -> RunConfig:
    file_values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        file_values = parse_config_text(path.read_text(), str(path))
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return build_config(file_values, overrides)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("BPDC_THREADS", "1")))
    except ValueError:
        raise ConfigError("BPDC_THREADS must be an integer") from None


def _require(cfg: RunConfig, *keys):
    missing = [k for k in keys if cfg.values.get(k) is None]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join(f"--{k}" for k in missing))


def _load_dataset(cfg: RunConfig) -> Dataset:
    _require(cfg, "data")
    return load_data(cfg.data, cfg.labels, cfg.scaling)


def _load_ckpt(cfg: RunConfig) -> Checkpoint:
    _require(cfg, "checkpoint")
    return load_checkpoint(cfg.checkpoint)


def _check_data(ds: Dataset, model: ModelState):
    if ds.D != model.hyper.D:
        raise ConfigError(f"data dimension {ds.D} does not match checkpoint D={model.hyper.D}")


def _encode_all(ds: Dataset, state: TrainState):
    return sparse_code_batch(ds.X, state.model, state.bank, state.mask)


def cmd_train(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    tcfg = cfg.train()
    out = Path(cfg.out_dir)
    if cfg.resume:
        ck = load_checkpoint(cfg.resume)
        state, seed = ck.state, ck.seed
        if seed != tcfg.seed:
            log.warning("resuming with checkpoint seed %d (configured seed %d ignored)", seed, tcfg.seed)
            tcfg = TrainConfig(**{**tcfg.__dict__, "seed": seed})
        model = state.model
    else:
        hyper = cfg.hyper(D=ds.D)
        model = ModelState.initialize(hyper, Rng(tcfg.seed, (1,)), hidden=cfg.hidden, activation=cfg.activation)
        state = TrainState.fresh(model, tcfg)
    _check_data(ds, model)
    if tcfg.batch_size > ds.N:
        raise ConfigError(f"batch_size {tcfg.batch_size} exceeds dataset size {ds.N}")
    final_path = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.ckpt"
    out.mkdir(parents=True, exist_ok=True)
    def periodic(info):
        if cfg.checkpoint_every and info.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_{info.iteration:07d}.ckpt", Checkpoint(state, tcfg.seed))

    try:
        result = fit(ds.X, model, tcfg, state=state, callback=periodic, workers=_workers())
    except NumericError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    rows = result.metrics
    atomic_write_text(out / "metrics.csv", ",".join(METRICS_HEADER) + "\n"
                      + "".join(format_metrics_row(r) + "\n" for r in rows))
    if result.pi_trace:
        export_pi_trace(result.pi_trace, out)
    save_checkpoint(final_path, Checkpoint(result.state, tcfg.seed))
    if cfg.export_figures:
        export_figures(result.model, result.bank, ds, _encode_all(ds, result.state), out,
                       result.pi_trace, cfg.n_recon)
    epi = result.bank.expected_pi()
    mse = f"{rows[-1][2]:.6g}" if rows else "n/a"
    print(f"trained to iteration {result.state.iteration}: final mse {mse}, "
          f"active factors (E[pi] > 0.01) {int(np.sum(epi > 0.01))}, checkpoint {final_path}")
    return 0


def cmd_encode(cfg: RunConfig) -> int:
    ck = _load_ckpt(cfg)
    ds = _load_dataset(cfg)
    _check_data(ds, ck.state.model)
    codes = _encode_all(ds, ck.state)
    lines = ["index,score,active"] + [f"{n},{c.score!r},{' '.join(map(str, c.active_set))}"
                                       for n, c in enumerate(codes)]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "codes.csv", "\n".join(lines) + "\n")
    print(f"wrote {len(codes)} codes to {out / 'codes.csv'}")
    return 0


def cmd_reconstruct(cfg: RunConfig) -> int:
    ck = _load_ckpt(cfg)
    ds = _load_dataset(cfg)
    _check_data(ds, ck.state.model)
    n = min(cfg.n_recon, ds.N)
    sub = ds.subset(n)
    codes = _encode_all(sub, ck.state)
    Z = np.stack([c.z for c in codes]).astype(np.float64)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = export_reconstructions(ck.state.model, sub, Z, out, n)
    print("wrote " + ", ".join(str(p) for p in written.values()))
    return 0


def cmd_sample(cfg: RunConfig) -> int:
    if cfg.checkpoint:
        model = load_checkpoint(cfg.checkpoint).state.model
    else:
        model = ModelState.initialize(cfg.hyper(), Rng(cfg.seed, (1,)), hidden=cfg.hidden, activation=cfg.activation)
    data = sample_dataset(model, cfg.n_samples, Rng(cfg.seed, (2,)), c_sample=cfg.c_sample)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_matrix_csv(out / "X.csv", data.X.T)
    save_matrix_csv(out / "Z_true.csv", data.Z.T.astype(np.int64))
    save_matrix_csv(out / "lambda_true.csv", data.lam[:, None])
    save_matrix_csv(out / "pi_true.csv", data.pi[:, None])
    print(f"wrote {cfg.n_samples} samples (D={model.hyper.D}) to {out}")
    return 0


def cmd_inspect(cfg: RunConfig) -> int:
    ck = _load_ckpt(cfg)
    state = ck.state
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    epi = state.bank.expected_pi()
    lines = ["factor,a,b,expected_pi,active"] + [
        f"{k},{a!r},{b!r},{e!r},{int(m)}" for k, (a, b, e, m) in
        enumerate(zip(state.bank.a, state.bank.b, epi, state.mask.active))]
    atomic_write_text(out / "expected_pi.csv", "\n".join(lines) + "\n")
    export_top_bits(state.model, state.bank, out)
    if cfg.data:
        ds = _load_dataset(cfg)
        _check_data(ds, state.model)
        if ds.labels is None:
            log.warning("no labels given; factor-sharing export skipped")
        else:
            Z = np.stack([c.z for c in _encode_all(ds, state)]).astype(np.float64)
            export_factor_sharing(Z, ds.labels, out)
    if cfg.trace:
        export_pi_trace(read_pi_trace(cfg.trace), out)
    order = np.argsort(-epi, kind="stable")
    print("factor  E[pi]     active")
    for k in order[: min(10, epi.size)]:
        print(f"{k:6d}  {epi[k]:.5f}  {bool(state.mask.active[k])}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    res = checks.gradient_check(cfg.seed)
    print(f"{'PASS' if res.passed else 'FAIL'}  {res.name}: {res.detail}")
    return 0 if res.passed else 1


def cmd_oracle(cfg: RunConfig) -> int:
    K = min(cfg.K, 10)
    results = checks.oracle_suite(cfg.seed, K=K)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "reconstruct": cmd_reconstruct,
    "sample": cmd_sample,
    "inspect": cmd_inspect,
    "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle,
}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_run_config(args)
        return COMMANDS[args.command](cfg)
    except (BPDCError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
