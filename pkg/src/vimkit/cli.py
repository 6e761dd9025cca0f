"""Command-line entry point: ``vimkit <command> [flags]``.

Configuration precedence is defaults < ``--config`` file < ``--set`` and
dedicated flags. Every command writes its resolved configuration to
``config.txt`` in the run directory before doing any work.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec, data, plotting
from . import config as cfgmod
from . import gradcheck as gc
from . import prior as pr
from . import probe as probe_mod
from . import tensor as T
from . import train as tr
from .codec import CodecConfig
from .errors import ConfigError, FormatError, IndexRangeError, NumericError, SamplingError, ShapeError
from .formats import read_grid, write_grid
from .prior import PriorConfig, TokenGrid

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class RunConfig:
    """Everything a command may read; flattened as ``section.key=value``."""

    seed: int = 0
    data: data.SyntheticSpec = field(default_factory=data.SyntheticSpec)
    codec: CodecConfig = field(default_factory=CodecConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    train1: tr.TrainConfig = field(default_factory=tr.TrainConfig.stage1)
    train2: tr.TrainConfig = field(default_factory=tr.TrainConfig.stage2)


def resolve_config(config_file=None, overrides: list[str] = (), env=None) -> tuple[RunConfig, dict[str, str]]:
    """Merge defaults, ``VIM_SEED``, the config file and ``key=value`` overrides."""
    env = os.environ if env is None else env
    flat: dict[str, str] = {}
    if env.get("VIM_SEED"):
        flat["seed"] = env["VIM_SEED"]
    if config_file is not None:
        try:
            flat.update(cfgmod.read_file(config_file))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_file}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        flat[k.strip()] = v.strip()
    rc = cfgmod.from_flat(RunConfig, flat)
    # the run seed drives training unless a stage seed was given explicitly
    if "train1.seed" not in flat:
        rc.train1 = dataclasses.replace(rc.train1, seed=rc.seed)
    if "train2.seed" not in flat:
        rc.train2 = dataclasses.replace(rc.train2, seed=rc.seed)
    return rc, cfgmod.to_flat(rc)


# -- run directory and metrics -------------------------------------------------------------------


class Run:
    """Run directory with a ``metrics.jsonl`` append log and human-readable echo."""

    def __init__(self, root: Path, quiet: bool = False):
        self.root = root
        self.quiet = quiet
        root.mkdir(parents=True, exist_ok=True)
        self.metrics_path = root / "metrics.jsonl"

    @classmethod
    def create(cls, out: str | None, runs_root: str, command: str, seed: int, quiet: bool = False) -> Run:
        if out:
            return cls(Path(out), quiet)
        stamp = time.strftime("%Y%m%d-%H%M%S")
        base = Path(runs_root) / f"{stamp}-{command}-s{seed}"
        path, n = base, 1
        while path.exists():
            path = base.with_name(f"{base.name}-{n}")
            n += 1
        return cls(path, quiet)

    def log(self, record: dict) -> None:
        flat = {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in record.items()}
        with open(self.metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(flat, sort_keys=False) + "\n")
        if not self.quiet:
            print(" ".join(f"{k}={_fmt(v)}" for k, v in flat.items()))

    def dump_config(self, flat: dict[str, str], command: str, argv: list[str]) -> None:
        text = f"# command: {command}\n# argv: {' '.join(argv)}\n" + cfgmod.dump_text(flat)
        (self.root / "config.txt").write_text(text, encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# -- commands -----------------------------------------------------------------------------------------


def _load_split(data_dir, split: str) -> data.DatasetManifest:
    path = Path(data_dir) / f"{split}.manifest"
    if not path.is_file():
        raise ConfigError(f"missing manifest {path}")
    return data.read_manifest(path)


def _write_history(run: Run, history: list[dict]) -> None:
    """Per-step training records; ``metrics.jsonl`` only holds the periodic evaluations."""
    with open(run.root / "train_history.jsonl", "w", encoding="utf-8") as fh:
        for r in history:
            fh.write(json.dumps(r) + "\n")


def cmd_gradcheck(args, rc: RunConfig, run: Run) -> int:
    reports = gc.run_checks(args.module, tol=args.tol, seed=rc.seed)
    ok = True
    for r in reports:
        run.log({"op": r.name, "max_rel_err": r.max_rel_err, "max_abs_err": r.max_abs_err,
                 "coords": r.coords, "passed": r.passed})
        ok &= r.passed
    run.log({"summary": "gradcheck", "checks": len(reports), "all_passed": ok})
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_gen_data(args, rc: RunConfig, run: Run) -> int:
    out = Path(args.data_dir) if args.data_dir else run.root / "data"
    manifests = data.gen_synthetic(rc.data, out)
    run.log({"data_dir": str(out), "train": len(manifests["train"].entries), "val": len(manifests["val"].entries)})
    imgs = [data.read_ppm(p) for p in manifests["train"].paths()[:32]]
    plotting.image_grid(np.stack(imgs), run.root / "samples.png",
                        titles=[lbl for _, lbl in manifests["train"].entries[:32]])
    return EXIT_OK


def cmd_train_quantizer(args, rc: RunConfig, run: Run) -> int:
    train_x, _ = data.load_images(_load_split(args.data, "train"))
    val_x, _ = data.load_images(_load_split(args.data, "val"))
    ckpt = run.root / "codec.vimc"
    state = tr.load_state(args.resume) if args.resume else tr.init_stage1(rc.codec, rc.train1)
    if state.stage != 1:
        raise ConfigError("--resume checkpoint is not a stage-1 codec")
    tc = state.train_config
    every = tc.eval_every or max(1, tc.steps // 10)
    while state.step < tc.steps:
        tr.run(state, every, (train_x,), checkpoint_path=ckpt, log=None)
        rec = {"step": state.step, "loss": state.history[-1]["loss"]}
        rec.update(tr.evaluate_codec(state.params, state.model_config, val_x))
        run.log(rec)
    _write_history(run, state.history)
    plotting.loss_curves(state.history, run.root / "loss.png", keys=("loss", "l2", "vq"), title="stage 1")
    with T.no_grad():
        out = codec.forward(val_x[:16], state.params, state.model_config)
    plotting.reconstruction_pairs(val_x[:16], out.x_hat.data, run.root / "reconstructions.png")
    run.log({"checkpoint": str(ckpt)})
    return EXIT_OK


def cmd_reconstruct(args, rc: RunConfig, run: Run) -> int:
    params, cfg = tr.load_model(args.checkpoint, expect_stage=1)
    x, _ = data.load_images(_load_split(args.data, args.split))
    x = x[: args.n] if args.n else x
    metrics = tr.evaluate_codec(params, cfg, x)
    with T.no_grad():
        out = codec.forward(x[:32], params, cfg)
    plotting.reconstruction_pairs(x[:32], out.x_hat.data, run.root / "reconstructions.png")
    run.log({"split": args.split, "images": len(x), **metrics})
    return EXIT_OK


def cmd_encode(args, rc: RunConfig, run: Run) -> int:
    params, cfg = tr.load_model(args.checkpoint, expect_stage=1)
    out = Path(args.tokens_dir) if args.tokens_dir else run.root / "tokens"
    for split in ("train", "val"):
        m = data.encode_corpus(_load_split(args.data, split), params, cfg, out)
        run.log({"split": split, "grids": len(m.entries), "tokens_dir": str(out)})
    return EXIT_OK


def _read_token_inputs(path) -> tuple[np.ndarray, list]:
    path = Path(path)
    if path.is_dir():
        if not (path / "val.manifest").is_file():
            grids = [read_grid(f)[0] for f in sorted(path.glob("*.vimq"))]
            if not grids:
                raise ConfigError(f"no val.manifest or .vimq files in {path}")
            return np.stack([g.indices for g in grids]), [g.class_label for g in grids]
        path = path / "val.manifest"
    if path.suffix == ".manifest":
        ids, labels, K, _ = data.load_tokens(data.read_manifest(path))
        return ids, [None] * len(ids) if labels is None else list(labels)
    grid, _ = read_grid(path)
    return grid.indices[None], [grid.class_label]


def cmd_decode(args, rc: RunConfig, run: Run) -> int:
    params, cfg = tr.load_model(args.checkpoint, expect_stage=1)
    ids, labels = _read_token_inputs(args.tokens)
    if ids.max() >= cfg.quantizer.K:
        raise ConfigError(f"token ids reach {ids.max()}, codec vocabulary is {cfg.quantizer.K}")
    with T.no_grad():
        imgs = codec.decode(ids.reshape(len(ids), cfg.grid, cfg.grid), params, cfg).x_hat.data
    out = run.root / "decoded"
    out.mkdir(exist_ok=True)
    for i, img in enumerate(imgs):
        data.write_ppm(out / f"{i:05d}.ppm", img)
    plotting.image_grid(imgs[:64], run.root / "decoded.png", titles=labels[:64])
    run.log({"decoded": len(imgs), "dir": str(out)})
    return EXIT_OK


def cmd_train_prior(args, rc: RunConfig, run: Run) -> int:
    tm = _load_split(args.tokens, "train")
    ids, labels, K, (h, w) = data.load_tokens(tm)
    vids, vlabels, _, _ = data.load_tokens(_load_split(args.tokens, "val"))
    pc = dataclasses.replace(rc.prior, grid_h=h, grid_w=w) if args.infer_grid else rc.prior
    if not pc.conditional:
        labels = vlabels = None
    elif labels is None:
        raise ConfigError("conditional prior needs labelled token grids")
    tr.check_vocabulary(ids, pc, K)
    ckpt = run.root / "prior.vimc"
    state = tr.load_state(args.resume) if args.resume else tr.init_stage2(pc, rc.train2)
    if state.stage != 2:
        raise ConfigError("--resume checkpoint is not a stage-2 prior")
    tc = state.train_config
    every = tc.eval_every or max(1, tc.steps // 10)
    while state.step < tc.steps:
        tr.run(state, every, (ids, labels), checkpoint_path=ckpt)
        rec = {"step": state.step, "loss": state.history[-1]["loss"]}
        rec.update(tr.evaluate_prior(state.params, state.model_config, vids, vlabels))
        run.log(rec)
    _write_history(run, state.history)
    plotting.loss_curves(state.history, run.root / "loss.png", title="stage 2 (nats/token)")
    run.log({"checkpoint": str(ckpt)})
    return EXIT_OK


def _codec_scorer(params, cfg: CodecConfig, target: int, num_classes: int):
    def score(grids: list[TokenGrid]) -> np.ndarray:
        ids = np.stack([g.indices for g in grids]).reshape(len(grids), cfg.grid, cfg.grid)
        with T.no_grad():
            imgs = codec.decode(ids, params, cfg).x_hat.data
        return data.class_scores(imgs, num_classes)[:, target]
    return score


def cmd_sample(args, rc: RunConfig, run: Run) -> int:
    params, cfg = tr.load_model(args.checkpoint, expect_stage=2)
    seed = rc.seed if args.seed is None else args.seed
    if args.acceptance_rate < 1.0:
        if not args.codec or args.class_label is None:
            raise ConfigError("rejection sampling needs --codec and --class")
        cparams, ccfg = tr.load_model(args.codec, expect_stage=1)
        scorer = _codec_scorer(cparams, ccfg, args.class_label, rc.data.num_classes)
        grids = pr.rejection_sample(params, cfg, args.class_label, args.acceptance_rate, scorer, args.n,
                                    seed, args.temperature)
    else:
        grids = pr.sample(params, cfg, args.n, args.class_label, args.temperature, seed)
    out = run.root / "samples"
    out.mkdir(exist_ok=True)
    for i, g in enumerate(grids):
        write_grid(out / f"{i:05d}.vimq", g, cfg.K)
    run.log({"samples": len(grids), "class": args.class_label, "seed": seed, "dir": str(out)})
    if args.codec:
        cparams, ccfg = tr.load_model(args.codec, expect_stage=1)
        ids = np.stack([g.indices for g in grids]).reshape(len(grids), ccfg.grid, ccfg.grid)
        with T.no_grad():
            imgs = codec.decode(ids, cparams, ccfg).x_hat.data
        plotting.image_grid(imgs, run.root / "samples.png")
        if args.class_label is not None:
            score = data.class_scores(imgs, rc.data.num_classes)[:, args.class_label]
            run.log({"mean_target_score": float(score.mean())})
    return EXIT_OK


def cmd_probe(args, rc: RunConfig, run: Run) -> int:
    params, cfg = tr.load_model(args.checkpoint, expect_stage=2)
    ids, labels, _, _ = data.load_tokens(_load_split(args.tokens, "train"))
    vids, vlabels, _, _ = data.load_tokens(_load_split(args.tokens, "val"))
    if labels is None or vlabels is None:
        raise ConfigError("probing needs labelled token grids")
    blocks = list(range(cfg.blocks)) if args.block == -1 else [args.block]
    prefix = (labels, vlabels) if cfg.conditional else (None, None)
    num_classes = int(max(labels.max(), vlabels.max()) + 1)
    table = probe_mod.probe_sweep(ids, labels, vids, vlabels, params, cfg, num_classes, blocks, prefix,
                                  steps=args.steps)
    with open(run.root / "probe.tsv", "w", encoding="utf-8") as fh:
        fh.write("block\taccuracy\n")
        for b, acc in table:
            fh.write(f"{b}\t{acc:.4f}\n")
            run.log({"block": b, "accuracy": acc})
    if len(table) > 1:
        plotting.probe_sweep(table, run.root / "probe.png", chance=1.0 / num_classes)
    return EXIT_OK


def cmd_eval(args, rc: RunConfig, run: Run) -> int:
    state = tr.load_state(args.checkpoint)
    if state.stage == 1:
        if not args.data:
            raise ConfigError("evaluating a codec needs --data")
        x, _ = data.load_images(_load_split(args.data, args.split))
        run.log({"stage": 1, "split": args.split, **tr.evaluate_codec(state.params, state.model_config, x)})
    else:
        if not args.tokens:
            raise ConfigError("evaluating a prior needs --tokens")
        ids, labels, K, _ = data.load_tokens(_load_split(args.tokens, args.split))
        tr.check_vocabulary(ids, state.model_config, K)
        labels = labels if state.model_config.conditional else None
        run.log({"stage": 2, "split": args.split,
                 **tr.evaluate_prior(state.params, state.model_config, ids, labels)})
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (default: VIM_SEED or 0)")
    common.add_argument("--out", help="run directory (default: <runs-root>/<timestamp>-<command>-s<seed>)")
    common.add_argument("--runs-root", default="runs")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    common.add_argument("--quiet", action="store_true")

    p = _Parser(prog="vimkit", description="Desk-scale vector-quantized image modeling toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--module", default="all", choices=["all", "tensor", "nn", "model"])
    s.add_argument("--tol", type=float, default=gc.DEFAULT_TOL)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("gen-data", parents=[common], help="render the synthetic shape dataset")
    s.add_argument("--data-dir", help="output directory (default: <run>/data)")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-quantizer", parents=[common], help="stage 1: train the image codec")
    s.add_argument("--data", required=True, help="directory with train/val manifests")
    s.add_argument("--resume", help="continue from a stage-1 checkpoint")
    s.set_defaults(func=cmd_train_quantizer)

    s = sub.add_parser("reconstruct", parents=[common], help="reconstruct images with a codec")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--n", type=int, default=0, help="limit to the first N images")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("encode", parents=[common], help="encode a dataset into VIMQ token grids")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--tokens-dir", help="output directory (default: <run>/tokens)")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", parents=[common], help="decode token grids to PPM images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--tokens", required=True, help="a .vimq file, a token manifest or a token directory")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("train-prior", parents=[common], help="stage 2: train the token prior")
    s.add_argument("--tokens", required=True, help="directory with token train/val manifests")
    s.add_argument("--resume", help="continue from a stage-2 checkpoint")
    s.add_argument("--no-infer-grid", dest="infer_grid", action="store_false",
                   help="keep prior.grid_h/grid_w instead of taking them from the tokens")
    s.set_defaults(func=cmd_train_prior)

    s = sub.add_parser("sample", parents=[common], help="sample token grids from a prior")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--class", dest="class_label", type=int)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--acceptance-rate", type=float, default=1.0)
    s.add_argument("--codec", help="stage-1 checkpoint used to decode (and score) samples")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("probe", parents=[common], help="linear probes on frozen prior features")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--tokens", required=True)
    s.add_argument("--block", type=int, default=-1, help="block index, or -1 to sweep every block")
    s.add_argument("--steps", type=int, default=500)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("eval", parents=[common], help="evaluate a codec or prior checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--tokens")
    s.add_argument("--split", default="val")
    s.set_defaults(func=cmd_eval)
    return p


@contextlib.contextmanager
def _thread_cap(n: int | None):
    if n is None:
        yield
        return
    if n < 1:
        raise UsageError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        with _thread_cap(args.threads):
            rc, flat = resolve_config(args.config, overrides)
            run = Run.create(args.out, args.runs_root, args.command, rc.seed, args.quiet)
            run.dump_config(flat, args.command, argv)
            if not args.quiet:
                print(f"run directory: {run.root}")
            return args.func(args, rc, run)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, IndexRangeError, ShapeError, SamplingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
