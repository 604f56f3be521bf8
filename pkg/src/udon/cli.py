"""Command-line entry point: ``udon {gen-data,train,eval,ablate}``.

Exit codes: 0 success, 2 contract/config/format error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import model as M
from . import trainer as T
from .autograd import ContractError
from .config import (ConfigError, default_config_path, env_overrides, from_flat, load_config,
                     parse_grid, parse_text)
from .datagen import (DatasetFormatError, GenerationError, generate_multidomain, read_dataset,
                      write_dataset)

EXIT_OK, EXIT_CONTRACT, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("udon")


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args, extra: dict[str, str] | None = None):
    path = args.config or default_config_path()
    values = _overrides(getattr(args, "set", None))
    values.update(extra or {})
    return load_config(path, values)


def _write_config(cfg, path: Path) -> None:
    path.write_text(cfg.to_text())


def cmd_gen_data(args) -> int:
    extra = {"data_seed": str(args.seed)} if args.seed is not None else {}
    cfg = _config(args, extra)
    data = generate_multidomain(cfg.domains, cfg.feature_dim, cfg.split_fractions,
                                cfg.data_seed, cfg.layout)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(data, out)
    counts = [int((data.domain == d).sum()) for d in range(data.num_domains)]
    print(f"wrote {len(data)} examples ({counts} per domain) to {out}")
    return EXIT_OK


def _save_result(result: T.TrainResult, out_dir: Path) -> None:
    extra = f"seed={result.seed}\n" + result.config.to_text()
    M.save_checkpoint(result.params, out_dir / "checkpoint.ckpt", extra)
    for k, teacher in enumerate(result.teachers):
        M.save_checkpoint(teacher, out_dir / f"teacher_{k}.ckpt", extra)
    result.log.write(out_dir)


def cmd_train(args) -> int:
    extra = {"data_path": args.data} if args.data else {}
    cfg = _config(args, extra)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out_dir / "config.cfg")
    data = T.load_data(cfg)
    try:
        result = T.train(cfg, seed, data)
    except T.DivergenceError as exc:
        report = {"status": "diverged", "step": exc.step, "phase": exc.phase,
                  "losses": {k: repr(v) for k, v in exc.losses.items()},
                  "run_id": cfg.run_id, "seed": seed}
        (out_dir / "divergence.json").write_text(json.dumps(report, indent=2) + "\n")
        print(f"diverged at step {exc.step} ({exc.phase}); report in "
              f"{out_dir / 'divergence.json'}", file=sys.stderr)
        return EXIT_DIVERGED
    _save_result(result, out_dir)
    report = T.evaluate_params(result.params, data, args.split)
    last = sum(result.phase_steps.values())
    T.write_report(report, out_dir, cfg.run_id, seed, last, args.split)
    print(f"{cfg.run_id} seed {seed}: {args.split} mean R@1 {100 * report.mean['R@1']:.2f} "
          f"mP@5 {100 * report.mean['mP@5']:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, extra = M.load_checkpoint(args.checkpoint)
    data = read_dataset(args.data)
    report = T.evaluate_params(params, data, args.split, args.mode, args.embedding)
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    meta = parse_text(extra) if extra else {}
    stem = f"eval_{args.split}_{args.mode}_{args.embedding}"
    T.write_report(report, out_dir, meta.get("run_id", "eval"), meta.get("seed", ""),
                   "final", args.split, stem=stem, timestamp=not args.no_timestamp)
    print(json.dumps(report.summary()["mean"], sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base_values, named, custom = parse_grid(Path(args.grid).read_text(), args.grid)
    path = args.config or default_config_path()
    values = parse_text(Path(path).read_text(), str(path))
    values.update(env_overrides())
    values.update(base_values)
    values.update(_overrides(args.set))
    base = from_flat(values)
    base.validate()
    cells: dict = {name: T.ABLATION_CELLS[name] for name in named if name in T.ABLATION_CELLS}
    unknown = [n for n in named if n not in T.ABLATION_CELLS and n not in custom]
    if unknown:
        raise ConfigError(f"unknown ablation cell(s): {unknown}")
    for name, cell_values in custom.items():
        cells[name] = from_flat({**values, **cell_values})
    if not cells:
        raise ConfigError("the grid names no cells")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_config(base, out_dir / "base_config.cfg")

    def progress(name, seed, report):
        print(f"{name:20s} seed {seed}: mean R@1 {100 * report.mean['R@1']:.2f}", flush=True)

    result = T.ablate(base, cells, data=T.load_data(base), split=args.split, on_cell=progress)
    T.write_ablation(result, out_dir)
    for f in result.failures:
        print(f"{f.cell} seed {f.seed} {f.kind}: {f.message}", file=sys.stderr)
    if any(f.kind == "error" for f in result.failures):
        return EXIT_CONTRACT
    if result.failures:
        return EXIT_DIVERGED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="udon", description="Universal embeddings with online multi-teacher distillation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file (default: packaged)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key; repeatable")

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="data seed (overrides data_seed)")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one run and evaluate it")
    common(t)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--data", help="dataset file (overrides data_path)")
    t.add_argument("--split", choices=["val", "test"], default="test")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["val", "test"], default="test")
    e.add_argument("--mode", choices=["joint", "separate"], default="joint")
    e.add_argument("--embedding", choices=["student", "teacher"], default="student")
    e.add_argument("--out-dir")
    e.add_argument("--no-timestamp", action="store_true")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid")
    common(a)
    a.add_argument("--grid", required=True)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--split", choices=["val", "test"], default="test")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except T.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContractError, ConfigError, GenerationError, DatasetFormatError,
            M.CheckpointFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
