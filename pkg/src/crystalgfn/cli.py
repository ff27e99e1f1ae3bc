"""Command-line entry points: train, sample, evaluate, bond-stats, export."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_arrays
from .cif import CifError, export_cif, parse_cif, source_space_group
from .config import DEFAULT_CONFIG_TEXT, ConfigError, RunConfig, config_from_dict, default_config, load_config
from .crystal import CrystalStructure
from .metrics import MatchTolerances, evaluate
from .oracles import OracleError, SubprocessOracle, SurrogateEnergy, relax_positions
from .policy import Policy
from .reward import BondStatsError, BondStatsTable, composite_reward
from .sampler import Sampler
from .trainer import Trainer, TrainingDivergedError, configs_from_checkpoint

log = logging.getLogger("crystalgfn")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- shared wiring ---------------------------------------------------------------

def resolve_bond_stats(cfg: RunConfig, base: Path | None) -> BondStatsTable:
    if cfg.bond_stats is None:
        return BondStatsTable.default()
    path = Path(cfg.bond_stats)
    if not path.is_absolute() and base is not None:
        path = base / path
    return BondStatsTable.from_csv(path)


def build_oracles(cfg: RunConfig, bond_stats: BondStatsTable):
    """(energy oracle, band-gap oracle or None) for a run configuration."""
    o = cfg.oracle
    if o.energy == "surrogate":
        energy = SurrogateEnergy(bond_stats)
    else:
        energy = SubprocessOracle(o.command, timeout=o.timeout)
    gap = SubprocessOracle(o.gap_command, key="band_gap", timeout=o.timeout, clamp=False) if o.gap_command else None
    return energy, gap


def _load_run_config(args) -> tuple[RunConfig, Path | None]:
    if args.config is None:
        return default_config(), None
    path = Path(args.config)
    return load_config(path), path.resolve().parent


def _run_config_from_meta(meta: dict) -> RunConfig:
    if "run_config" in meta:
        return config_from_dict(meta["run_config"])
    pcfg, scfg, rcfg, tcfg = configs_from_checkpoint(meta)
    return RunConfig(seed=tcfg.seed, sampler=scfg, reward=rcfg, policy=pcfg, train=tcfg)


# -- train -------------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.config is None:
        raise UsageError("train needs --config (write a template with `crystalgfn export --default-config --out FILE`)")
    cfg, base = _load_run_config(args)
    if args.seed is not None:
        cfg.seed = cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    bond_stats = resolve_bond_stats(cfg, base)
    if cfg.bond_stats is not None:
        cfg.bond_stats = str((base / cfg.bond_stats) if base and not Path(cfg.bond_stats).is_absolute() else cfg.bond_stats)
    run_dir = Path(args.out) if args.out else Path(cfg.output_dir) / time.strftime("%Y%m%d-%H%M%S")
    log_path = run_dir / "metrics.jsonl"
    if log_path.exists() and args.checkpoint is None:
        raise UsageError(f"{log_path} already exists; choose another --out or pass --checkpoint to resume")
    for sub in ("checkpoints", "samples"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.dump())

    policy = Policy(cfg.policy, len(cfg.sampler.elements), seed=cfg.seed)
    energy, gap = build_oracles(cfg, bond_stats)
    try:
        trainer = Trainer(policy, cfg.sampler, cfg.reward, cfg.train, energy, bond_stats, gap)
        trainer.extra_meta = {"run_config": cfg.to_dict()}
        if args.checkpoint is not None:
            trainer.restore(args.checkpoint)
        remaining = max(cfg.train.epochs - trainer.epoch, 0)
        history = trainer.train(epochs=remaining, log_path=log_path, checkpoint_dir=run_dir / "checkpoints")
    finally:
        for o in (energy, gap):
            if hasattr(o, "close"):
                o.close()
    last = history[-1] if history else {}
    print(json.dumps({"run_dir": str(run_dir), "epochs": trainer.epoch, "states_visited": trainer.states_visited,
                      "modes": trainer.modes.count, "final_mean_reward": last.get("mean_reward")}))
    return EXIT_OK


# -- sample ------------------------------------------------------------------------

def cmd_sample(args) -> int:
    if args.checkpoint is None:
        raise UsageError("sample needs --checkpoint")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    ckpt = Path(args.checkpoint)
    arrays, meta = load_arrays(ckpt)
    cfg = _run_config_from_meta(meta)
    if args.config is not None:  # oracle / bond-table overrides
        override, base = _load_run_config(args)
        cfg.oracle, cfg.bond_stats = override.oracle, override.bond_stats
        bond_stats = resolve_bond_stats(cfg, base)
    else:
        bond_stats = resolve_bond_stats(cfg, None)
    policy = Policy(cfg.policy, int(meta["n_elements"]))
    policy.load(arrays)
    if args.out:
        out = Path(args.out)
    elif ckpt.parent.name == "checkpoints":
        out = ckpt.parent.parent / "samples"
    else:
        raise UsageError("sample needs --out when the checkpoint is not inside a run directory")
    out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    records, rejected, _ = Sampler(policy, cfg.sampler).draw(args.n, rng)
    energy, gap = build_oracles(cfg, bond_stats)
    items = []
    try:
        for r in records:
            sg = r.terminal.sg
            # score the structure exactly as written so the index recomputes from the files
            structure = parse_cif(export_cif(r.structure, symmetry=sg))
            br = composite_reward(structure, cfg.reward, energy, bond_stats, gap)
            items.append((structure, sg, br))
    finally:
        for o in (energy, gap):
            if hasattr(o, "close"):
                o.close()
    order = sorted(range(len(items)), key=lambda k: (-items[k][2].composite, k))
    index = []
    for rank, k in enumerate(order):
        structure, sg, br = items[k]
        stem = f"sample_{rank:04d}"
        (out / f"{stem}.cif").write_text(export_cif(structure, symmetry=sg, name=stem))
        mirror = {"structure": structure.to_dict(), "space_group": sg, "reward": br.to_dict()}
        (out / f"{stem}.json").write_text(json.dumps(mirror, indent=1))
        index.append({"rank": rank, "cif": f"{stem}.cif", "json": f"{stem}.json", "formula": structure.formula(),
                      "space_group": sg, "n_atoms": len(structure), "reward": br.to_dict()})
    (out / "index.json").write_text(json.dumps(
        {"checkpoint": str(ckpt), "seed": args.seed, "n": args.n, "rejected": rejected, "samples": index}, indent=1))
    print(json.dumps({"out": str(out), "n": len(index), "best": index[0]["reward"]["composite"]}))
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------------

def read_sample_dir(path: Path) -> tuple[list[CrystalStructure], list[int]]:
    if not path.is_dir():
        raise UsageError(f"not a directory: {path}")
    files = sorted(path.glob("*.cif"))
    if not files:
        raise UsageError(f"no .cif files in {path}")
    structures, groups = [], []
    for f in files:
        text = f.read_text()
        try:
            structures.append(parse_cif(text))
        except CifError as exc:
            raise CifError(f"{f.name}: {exc}") from None
        sg = source_space_group(text)
        if sg is None:
            log.warning("%s has no source space-group tag; counted as triclinic", f.name)
            sg = 1
        groups.append(sg)
    return structures, groups


def cmd_evaluate(args) -> int:
    if args.sample_dir is None:
        raise UsageError("evaluate needs a sample directory")
    sample_dir = Path(args.sample_dir)
    structures, groups = read_sample_dir(sample_dir)
    cfg, base = _load_run_config(args)
    bond_stats = resolve_bond_stats(cfg, base)
    energy, _ = build_oracles(cfg, bond_stats)
    relaxed = None
    if not args.no_relax:
        if isinstance(energy, SurrogateEnergy):
            relaxed = [relax_positions(s, energy) for s in structures]
        else:
            log.warning("match rate needs the built-in surrogate for relaxation; skipped")
    try:
        report = evaluate(structures, groups, energy, relaxed, MatchTolerances())
    finally:
        if hasattr(energy, "close"):
            energy.close()
    text = json.dumps(report.to_dict(), indent=1)
    out = Path(args.out) if args.out else sample_dir / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text + "\n")
    print(text)
    return EXIT_OK


# -- bond-stats --------------------------------------------------------------------

def cmd_bond_stats(args) -> int:
    if args.csv is None:
        raise UsageError("bond-stats needs a CSV path")
    table = BondStatsTable.from_csv(args.csv)
    if args.config is not None:
        cfg_path = Path(args.config)
        cfg = load_config(cfg_path)
        dest = Path(args.out) if args.out else cfg_path.parent / "bond_stats.csv"
        missing = [(a, b) for i, a in enumerate(cfg.sampler.elements) for b in cfg.sampler.elements[i:]
                   if (a, b) not in table]
        if missing:
            log.warning("table lacks %d element pair(s) of the configured set, e.g. %s", len(missing), missing[:3])
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(table.to_csv_text())
        try:
            cfg.bond_stats = str(dest.resolve().relative_to(cfg_path.resolve().parent))
        except ValueError:
            cfg.bond_stats = str(dest.resolve())
        cfg_path.write_text(cfg.dump())
        print(json.dumps({"pairs": len(table), "installed": str(dest), "config": str(cfg_path)}))
    else:
        if args.out:
            Path(args.out).write_text(table.to_csv_text())
        print(json.dumps({"pairs": len(table), "valid": True}))
    return EXIT_OK


# -- export ------------------------------------------------------------------------

def cmd_export(args) -> int:
    """Convert between the JSON structure mirror and CIF, or write the default config."""
    if args.default_config:
        if args.out is None:
            sys.stdout.write(DEFAULT_CONFIG_TEXT)
        else:
            Path(args.out).write_text(DEFAULT_CONFIG_TEXT)
        return EXIT_OK
    if args.input is None or args.out is None:
        raise UsageError("export needs INPUT and --out (or --default-config)")
    src, dst = Path(args.input), Path(args.out)
    if src.suffix == ".json":
        data = json.loads(src.read_text())
        group = data.get("space_group") if isinstance(data, dict) else None
        structure = CrystalStructure.from_dict(data.get("structure", data))
    elif src.suffix == ".cif":
        text = src.read_text()
        structure, group = parse_cif(text), source_space_group(text)
    else:
        raise UsageError(f"unsupported input type {src.suffix!r} (use .json or .cif)")
    if dst.suffix == ".cif":
        dst.write_text(export_cif(structure, symmetry=group, name=dst.stem))
    elif dst.suffix == ".json":
        dst.write_text(json.dumps({"structure": structure.to_dict(), "space_group": group}, indent=1))
    else:
        raise UsageError(f"unsupported output type {dst.suffix!r} (use .json or .cif)")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crystalgfn", description="Symmetry-aware crystal generation with trajectory balance.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a sampler from a YAML config")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--out", help="run directory (default: <output_dir>/<timestamp>)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw structures from a trained checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--config", help="override oracle and bond-table settings")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="metrics report for a directory of CIFs")
    e.add_argument("sample_dir", nargs="?")
    e.add_argument("--config")
    e.add_argument("--out", help="report path (default: <sample_dir>/report.json)")
    e.add_argument("--no-relax", action="store_true", help="skip relaxation and structure matching")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bond-stats", help="validate a bond-statistics CSV and optionally install it")
    b.add_argument("csv", nargs="?")
    b.add_argument("--config", help="config file to point at the installed table")
    b.add_argument("--out", help="destination for the normalized table")
    b.set_defaults(func=cmd_bond_stats)

    x = sub.add_parser("export", help="convert structures between JSON and CIF")
    x.add_argument("input", nargs="?")
    x.add_argument("--out")
    x.add_argument("--default-config", action="store_true", help="write the documented default config")
    x.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"crystalgfn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BondStatsError, CifError, CheckpointError, OracleError, TrainingDivergedError,
            ValueError, KeyError, OSError) as exc:
        print(f"crystalgfn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
