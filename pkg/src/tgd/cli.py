"""Command-line front end: ``tgd <command> [--config FILE] [--seed N] [--out DIR] [key=value ...]``.

Every command writes its resolved configuration next to its outputs as
``<name>.config``; running the same command with ``--config`` pointing at
that file reproduces the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import data as Dm
from . import distill as D
from . import evaluation as E
from . import gradcheck as G
from . import tda
from . import tensor as T
from .errors import ConfigError, DataError, NumericError
from .nets import build

log = logging.getLogger("tgd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ALPHA_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99)


# ---------------------------------------------------------------------------
# datasets


def load_split(cfg: C.RunConfig, split: str) -> Dm.Dataset:
    d = cfg.data
    if d.source == "cifar":
        if not d.path:
            raise ConfigError("data.path must name a CIFAR-10 directory when data.source=cifar")
        size = d.subset_size if split == "train" else d.test_subset_size
        ds = Dm.load_cifar10(d.path, subset_size=size, split=split)
    else:
        # one generated pool, split by position, so train and test never share images
        pool = Dm.gen_synthetic(d.source, d.n_train + d.n_test, seed=d.seed, num_classes=d.num_classes, noise=d.noise, size=d.size)
        pos = np.arange(d.n_train) if split == "train" else np.arange(d.n_train, d.n_train + d.n_test)
        ds = pool.subset(pos)
    if split == "train" and d.label_noise > 0:
        ds = Dm.flip_labels(ds, d.label_noise, seed=d.seed + 1)
    return ds


def _cache_for(cfg: C.RunConfig, ds: Dm.Dataset) -> Dm.PiCache:
    path = cfg.run.path("pi_cache", "pi_cache.bin")
    if not path.exists():
        raise DataError(f"persistence-image cache {path} not found; run `tgd extract` first")
    cache = Dm.read_pi_cache(path)
    if _pi_key(cache.params) != _pi_key(cfg.pi):
        raise ConfigError(f"cache {path} was built with {cache.params}, config asks for {cfg.pi}")
    return cache


def _pi_key(p: tda.PiParams) -> tuple:
    return (p.grid_size, p.birth_range, p.lifetime_range, p.std, p.lifetime_threshold, p.channels)


def _load_net(spec, path: Path, role: str):
    if not path.exists():
        raise DataError(f"{role} checkpoint {path} not found")
    net = build(spec, seed=0)
    net.load_state(T.load_checkpoint(path))
    return net


def _test_pis(cfg: C.RunConfig, images: np.ndarray, log_scale: bool) -> np.ndarray:
    grids = tda.extract_pi_batch(images, cfg.pi)
    return D.pi_inputs(grids.transpose(0, 2, 3, 1), log_scale)


# ---------------------------------------------------------------------------
# commands


def cmd_extract(cfg: C.RunConfig, args) -> dict:
    ds = load_split(cfg, "train")
    out = cfg.run.path("pi_cache", "pi_cache.bin")
    cache = Dm.build_pi_cache(ds, cfg.pi, path=out, workers=cfg.run.workers)
    log.info("wrote %d persistence images (%d channels) to %s", len(cache), cache.grids.shape[1], out)
    return {"records": len(cache), "path": str(out)}


def _train_config(cfg: C.RunConfig) -> D.DistillConfig:
    return dataclasses.replace(cfg.distill, mode="scratch", anneal=False, alpha=None)


def cmd_train_teacher(cfg: C.RunConfig, args) -> dict:
    ds = load_split(cfg, "train")
    out_dir = Path(cfg.run.out)
    if args.modality == "raw":
        name, spec, cache = "teacher1", cfg.teacher1, None
    else:
        name, spec, cache = "teacher2", cfg.teacher2, _cache_for(cfg, ds)
    res = D.train(_train_config(cfg), ds, pi_cache=cache, student_spec=spec, modality=args.modality, log_path=out_dir / f"{name}.metrics.csv")
    T.save_checkpoint(cfg.run.path(f"{name}_ckpt", f"{name}.ckpt"), res.net.state())
    return {"best_epoch": res.best_epoch, "val_acc": res.log[res.best_epoch].val_acc}


def _distill_once(cfg: C.RunConfig, out_dir: Path, ds: Dm.Dataset) -> dict:
    dc = cfg.distill
    teachers = D.Teachers()
    if dc.needs_teacher1():
        teachers.teacher1 = _load_net(cfg.teacher1, cfg.run.path("teacher1_ckpt", "teacher1.ckpt"), "teacher1")
    cache = None
    if dc.needs_teacher2():
        teachers.teacher2 = _load_net(cfg.teacher2, cfg.run.path("teacher2_ckpt", "teacher2.ckpt"), "teacher2")
        cache = _cache_for(cfg, ds)
    init = None
    if dc.anneal:
        init_path = cfg.run.path("init_ckpt", "student_scratch.ckpt")
        if not init_path.exists():
            raise DataError(f"annealing needs a scratch student at {init_path}; run `tgd distill distill.mode=scratch` first")
        init = init_path
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"student_{dc.mode}"
    res = D.train(dc, ds, teachers, cache, student_spec=cfg.student, init_state=init, log_path=out_dir / f"{stem}.metrics.csv")
    T.save_checkpoint(out_dir / f"{stem}.ckpt", res.net.state())
    return {"best_epoch": res.best_epoch, "val_acc": res.log[res.best_epoch].val_acc}


def cmd_distill(cfg: C.RunConfig, args) -> dict:
    ds = load_split(cfg, "train")
    if not args.alpha_sweep:
        return _distill_once(cfg, Path(cfg.run.out), ds)
    results = {}
    for alpha in ALPHA_SWEEP:
        sub = dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, alpha=alpha))
        run_dir = Path(cfg.run.out) / f"alpha_{alpha}"
        results[alpha] = _distill_once(sub, run_dir, ds)
        _write_resolved(sub, run_dir, "distill")
    return results


def _role_spec(cfg: C.RunConfig, role: str):
    return {"student": cfg.student, "teacher1": cfg.teacher1, "teacher2": cfg.teacher2}[role]


def cmd_eval(cfg: C.RunConfig, args) -> dict:
    ds = load_split(cfg, "test")
    net = _load_net(_role_spec(cfg, args.role), Path(args.checkpoint), args.role)
    noise = E.NoiseSpec(level=args.noise_level, seed=cfg.run.seed, additive=args.additive_noise) if args.noise_level else None
    if args.role == "teacher2":
        images = ds.images if noise is None else np.round(E.corrupt_inputs(ds.inputs(), noise) * 255).astype(np.uint8)
        report = E.evaluate_inputs(net, _test_pis(cfg, images, cfg.distill.pi_log_scale), ds.labels, noise, checkpoint=args.checkpoint)
    else:
        report = E.evaluate(net, ds, noise, checkpoint=args.checkpoint)
    name = f"eval_{args.role}" + (f"_noise{args.noise_level}" if noise else "")
    E.write_report(Path(cfg.run.out) / f"{name}.json", report)
    return report


def cmd_export_sim(cfg: C.RunConfig, args) -> dict:
    ds = load_split(cfg, "test")
    b = min(args.batch_size, len(ds))
    pos = np.sort(np.random.default_rng(cfg.run.seed).choice(len(ds), b, replace=False))
    pos = pos[np.argsort(ds.labels[pos], kind="stable")]  # label-sorted for visible class blocks
    student = _load_net(cfg.student, Path(args.student), "student")
    t1 = _load_net(cfg.teacher1, cfg.run.path("teacher1_ckpt", "teacher1.ckpt"), "teacher1")
    t2 = _load_net(cfg.teacher2, cfg.run.path("teacher2_ckpt", "teacher2.ckpt"), "teacher2")
    layer = args.layer if args.layer is not None else cfg.student.num_blocks - 1
    mats = E.similarity_matrices(student, t1, t2, ds.inputs(pos), _test_pis(cfg, ds.images[pos], cfg.distill.pi_log_scale), layer, cfg.distill.alpha)
    out_dir = Path(cfg.run.out) / f"similarity_layer{layer}"
    E.export_similarity(out_dir, mats)
    T.atomic_write(out_dir / "labels.csv", "".join(f"{int(v)}\n" for v in ds.labels[pos]))
    return {k: E.block_contrast(m, ds.labels[pos]) for k, m in mats.items()}


def cmd_gradcheck(cfg: C.RunConfig, args) -> dict:
    results = G.run_suite(seeds=range(args.instances))
    failed = [r for r in results if not r.passed(args.tol)]
    lines = [f"{r.name},{r.seed},{r.rel_error:.3e},{'ok' if r.passed(args.tol) else 'FAIL'}" for r in results]
    Path(cfg.run.out).mkdir(parents=True, exist_ok=True)
    T.atomic_write(Path(cfg.run.out) / "gradcheck.csv", "name,seed,rel_error,status\n" + "\n".join(lines) + "\n")
    for line in lines:
        print(line)
    if failed:
        raise NumericError(f"{len(failed)} gradient checks exceed relative error {args.tol}")
    return {"cases": len(results)}


COMMANDS = {
    "extract": cmd_extract,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "export-sim": cmd_export_sim,
    "gradcheck": cmd_gradcheck,
}


def _config_name(command: str, args) -> str:
    if command == "train-teacher":
        return "teacher1" if args.modality == "raw" else "teacher2"
    return command


def _write_resolved(cfg: C.RunConfig, out_dir: Path, name: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    C.write_config(out_dir / f"{name}.config", cfg)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (flags and overrides win)")
    common.add_argument("--seed", type=int, help="sets run.seed")
    common.add_argument("--out", help="output directory (run.out)")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("overrides", nargs="*", metavar="section.key=value")

    parser = argparse.ArgumentParser(prog="tgd", description="Topological-guided knowledge distillation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("extract", parents=[common], help="build the persistence-image cache")
    p = sub.add_parser("train-teacher", parents=[common], help="train a teacher from scratch")
    p.add_argument("--modality", choices=("raw", "pi"), default="raw")
    p = sub.add_parser("distill", parents=[common], help="train a student under distill.mode")
    p.add_argument("--alpha-sweep", action="store_true", help=f"one run directory per alpha in {ALPHA_SWEEP}")
    p = sub.add_parser("eval", parents=[common], help="accuracy, ECE and NLL on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--role", choices=("student", "teacher1", "teacher2"), default="student")
    p.add_argument("--noise-level", type=int, choices=(1, 2, 3, 4))
    p.add_argument("--additive-noise", action="store_true", help="additive pixel noise instead of blur")
    p = sub.add_parser("export-sim", parents=[common], help="write similarity maps as CSV and PGM")
    p.add_argument("--student", required=True, help="student checkpoint")
    p.add_argument("--layer", type=int)
    p.add_argument("--batch-size", type=int, default=64)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of all operators and losses")
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _overrides(args) -> dict[str, str]:
    values = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"expected section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["run.seed"] = str(args.seed)
    if args.out is not None:
        values["run.out"] = args.out
    return values


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load_config(args.config, _overrides(args)).resolved()
        out_dir = Path(cfg.run.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](cfg, args)
        if not (args.command == "distill" and args.alpha_sweep):
            _write_resolved(cfg, out_dir, _config_name(args.command, args))
    except ConfigError as exc:
        print(f"tgd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"tgd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArithmeticError as exc:  # NumericError and FloatingPointError
        print(f"tgd: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("%s done: %s", args.command, result)
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
