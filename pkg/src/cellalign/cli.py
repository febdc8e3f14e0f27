"""Command-line interface: ``cellalign {align,eval,synth,concordance,supercell,rerun}``.

Every command that writes into ``--out`` also writes ``manifest.json``
recording the argument vector, the resolved configuration, input digests
and the seed; ``cellalign rerun manifest.json`` replays it.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
import types
import typing
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .errors import CellAlignError, ConfigError, IoError
from .evaluation import concordance, evaluate, regional_composition, regional_concordance
from .geometry import RigidTransform
from .io import (SchemaConfig, file_sha256, read_cell_table, read_json, read_landmarks,
                 read_transform, write_cell_table, write_json, write_landmarks, write_matches,
                 write_transform)
from .pipeline import AlignmentConfig, align, align_large, supercell_cluster
from .synth import SynthScenario, generate
from .transform_fit import fit_rigid

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DEGRADED = 2

MANIFEST = "manifest.json"


# --- config flags generated from the dataclasses ----------------------------

def _unwrap_optional(tp: Any) -> tuple[Any, bool]:
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def _config_fields(cls: type, prefix: str = "") -> list[tuple[str, tuple[str, ...], Any, bool]]:
    """Flattened ``(flag, path, type, optional)`` for every leaf field of ``cls``."""
    out = []
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        tp, optional = _unwrap_optional(hints[f.name])
        if dataclasses.is_dataclass(tp):
            for flag, path, sub_tp, sub_opt in _config_fields(tp, f"{prefix}{f.name}-"):
                out.append((flag, (f.name, *path), sub_tp, sub_opt))
            continue
        out.append((f"{prefix}{f.name}".replace("_", "-"), (f.name,), tp, optional))
    return out


# "--flag none" must override a value from --config, so it cannot parse to
# None (which means "flag not given").
_EXPLICIT_NONE = object()


def _optional_number(kind: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str) -> Any:
        return _EXPLICIT_NONE if text.lower() == "none" else kind(text)
    parse.__name__ = kind.__name__
    return parse


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("alignment configuration")
    group.add_argument("--config", type=Path, help="JSON file with a full or partial configuration")
    for flag, path, tp, optional in _config_fields(AlignmentConfig):
        dest = "cfg__" + "__".join(path)
        if tp is bool:
            group.add_argument(f"--{flag}", dest=dest, action=argparse.BooleanOptionalAction, default=None)
        elif typing.get_origin(tp) is tuple:
            group.add_argument(f"--{flag}", dest=dest, nargs="+", default=None, metavar="NAME")
        elif tp in (int, float):
            kind = _optional_number(tp) if optional else tp
            group.add_argument(f"--{flag}", dest=dest, type=kind, default=None,
                               metavar="NONE|" + tp.__name__.upper() if optional else tp.__name__.upper())
        else:
            group.add_argument(f"--{flag}", dest=dest, type=str, default=None)


def resolve_config(args: argparse.Namespace) -> AlignmentConfig:
    """Defaults, overlaid with ``--config``, overlaid with explicit flags."""
    base: dict[str, Any] = AlignmentConfig().to_dict()
    if getattr(args, "config", None):
        loaded = read_json(args.config)
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: configuration must be a JSON object")
        for key, value in loaded.items():
            if isinstance(value, dict) and isinstance(base.get(key), dict):
                base[key].update(value)
            else:
                base[key] = value
    for name, value in vars(args).items():
        if not name.startswith("cfg__") or value is None:
            continue
        path = name[len("cfg__"):].split("__")
        node = base
        for part in path[:-1]:
            node = node[part]
        node[path[-1]] = None if value is _EXPLICIT_NONE else value
    try:
        return AlignmentConfig.from_dict(base)
    except TypeError as exc:
        raise ConfigError(f"bad configuration: {exc}") from None


# --- shared helpers ----------------------------------------------------------

def _add_schema_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("input columns")
    g.add_argument("--id-col", default="cell_id")
    g.add_argument("--x-col", default="x")
    g.add_argument("--y-col", default="y")
    g.add_argument("--label-col", default=None)
    g.add_argument("--unit", choices=("um", "px"), default="um")
    g.add_argument("--pixel-size", type=float, default=None, help="micrometres per pixel when --unit px")
    g.add_argument("--lenient", action="store_true", help="skip malformed rows instead of failing")


def _schema(args: argparse.Namespace, modality: str = "other") -> SchemaConfig:
    return SchemaConfig(id_col=args.id_col, x_col=args.x_col, y_col=args.y_col,
                        label_col=args.label_col, unit=args.unit, pixel_size=args.pixel_size,
                        modality=modality)


def _read_table(path: Path, args: argparse.Namespace, modality: str):
    table = read_cell_table(path, _schema(args, modality), strict=not args.lenient)
    return table


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _prepare_out(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_manifest(out: Path, command: str, argv: Sequence[str], inputs: Sequence[Path],
                    config: dict[str, Any], seed: int | None, outputs: Sequence[str],
                    started: str) -> None:
    manifest = {
        "tool": "cellalign",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "cwd": str(Path.cwd()),
        "config": config,
        "seed": seed,
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": {name: file_sha256(out / name) for name in outputs},
        "started_utc": started,
        "finished_utc": _now(),
    }
    write_json(manifest, out / MANIFEST)


# --- commands ----------------------------------------------------------------

def cmd_align(args: argparse.Namespace, argv: Sequence[str]) -> int:
    started = _now()
    config = resolve_config(args)
    source = _read_table(args.source, args, "HE")
    target = _read_table(args.target, args, "MxIF")
    runner = align_large if config.supercell_grid is not None else align
    result = runner(source, target, config, seed=args.seed)
    out = _prepare_out(args.out)
    write_transform(result.coarse, out / "coarse.json")
    write_transform(result.refined, out / "refined.json")
    write_matches(result.matches, out / "matches.csv")
    write_json({"coarse_only": result.coarse_only, **result.diagnostics}, out / "diagnostics.json")
    files = ["coarse.json", "refined.json", "matches.csv", "diagnostics.json"]
    _write_manifest(out, "align", argv, [args.source, args.target], config.to_dict(),
                    args.seed, files, started)
    if result.coarse_only:
        print(f"warning: only {len(result.matches)} matches survived; refined = coarse",
              file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    landmarks = read_landmarks(args.landmarks)
    estimated = read_transform(args.estimated)
    gt = read_transform(args.gt) if args.gt else fit_rigid(landmarks.source, landmarks.target)
    report = evaluate(landmarks, estimated, gt).to_dict(degrees=True)
    if args.out:
        write_json(report, args.out)
    else:
        from .io import dumps_json
        sys.stdout.write(dumps_json(report))
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, argv: Sequence[str]) -> int:
    started = _now()
    scenario = SynthScenario(
        n_points=args.n_points, extent=args.extent, cluster_count=args.clusters,
        cluster_sigma=args.cluster_sigma,
        transform=RigidTransform.from_degrees(args.theta_deg, args.dx, args.dy),
        jitter_sigma=args.jitter, dropout_rate=args.dropout, spurious_rate=args.spurious,
        feature_noise=args.feature_noise, min_spacing=args.min_spacing,
        tumor_fraction=args.tumor_fraction, seed=args.seed)
    result = generate(scenario)
    out = _prepare_out(args.out)
    write_cell_table(result.source, out / "source.csv")
    write_cell_table(result.target, out / "target.csv")
    with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src_id", "tgt_id"])
        w.writerows(sorted(result.truth.items()))
    write_transform(result.transform, out / "truth_transform.json")
    write_landmarks(result.landmarks(args.landmarks, args.seed), out / "landmarks.csv")
    files = ["source.csv", "target.csv", "truth.csv", "truth_transform.json", "landmarks.csv"]
    _write_manifest(out, "synth", argv, [], scenario.to_dict(), args.seed, files, started)
    return EXIT_OK


def _feature_pairs(specs: Sequence[str] | None) -> list[tuple[str, str]] | None:
    if not specs:
        return None
    pairs = []
    for spec in specs:
        src, sep, tgt = spec.partition(":")
        pairs.append((src, tgt if sep else src))
    return pairs


def cmd_concordance(args: argparse.Namespace, argv: Sequence[str]) -> int:
    started = _now()
    source = _read_table(args.source, args, "HE")
    target = _read_table(args.target, args, "MxIF")
    transform = read_transform(args.transform)
    mapped = source.mapped(transform)
    radius = math.inf if args.radius is not None and args.radius <= 0 else args.radius
    report = concordance(mapped, target, _feature_pairs(args.feature), radius)
    out = _prepare_out(args.out)
    files = ["concordance.json"]
    write_json(report.to_dict(), out / "concordance.json")
    for (fs, ft), (x, y) in report.scatter.items():
        name = f"scatter_{fs}__{ft}.csv"
        with open(out / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y"])
            w.writerows((repr(float(a)), repr(float(b))) for a, b in zip(x, y))
        files.append(name)
        if args.svg:
            from .plotting import scatter_svg
            svg = f"scatter_{fs}__{ft}.svg"
            scatter_svg(x, y, out / svg, xlabel=f"source {fs}", ylabel=f"target {ft}")
            files.append(svg)
    if args.positive_label is not None:
        comp_t = regional_composition(target, args.grid_size, args.positive_label)
        rows, cols = comp_t.shape
        comp_s = regional_composition(mapped, args.grid_size, args.positive_label,
                                      origin=comp_t.origin, shape=(rows, cols))
        sim = regional_concordance(comp_s, comp_t)
        with open(out / "regional.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "value"])
            w.writerows((r, c, repr(v)) for r, c, v in sim.cells())
        files.append("regional.csv")
        if args.svg:
            from .plotting import heatmap_svg
            heatmap_svg(sim, out / "regional.svg", title="regional composition similarity")
            files.append("regional.svg")
    cfg = {"radius": args.radius, "feature": args.feature, "grid_size": args.grid_size,
           "positive_label": args.positive_label, "svg": args.svg}
    _write_manifest(out, "concordance", argv, [args.source, args.target, args.transform],
                    cfg, None, files, started)
    return EXIT_OK


def cmd_supercell(args: argparse.Namespace, argv: Sequence[str]) -> int:
    started = _now()
    table = _read_table(args.cells, args, "other")
    sc = supercell_cluster(table, args.grid_size)
    out = _prepare_out(args.out)
    with open(out / "supercells.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["supercell", "x", "y", "weight"])
        for i, ((x, y), wt) in enumerate(zip(sc.xy, sc.weights)):
            w.writerow([i, repr(float(x)), repr(float(y)), int(wt)])
    with open(out / "membership.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "supercell"])
        w.writerows(zip(table.ids, (int(v) for v in sc.labels)))
    _write_manifest(out, "supercell", argv, [args.cells], {"grid_size": args.grid_size}, None,
                    ["supercells.csv", "membership.csv"], started)
    return EXIT_OK


def cmd_rerun(args: argparse.Namespace, argv: Sequence[str]) -> int:
    manifest = read_json(args.manifest)
    try:
        recorded = list(manifest["argv"])
        inputs = dict(manifest.get("inputs", {}))
        cwd = Path(manifest.get("cwd", "."))
    except (KeyError, TypeError):
        raise ConfigError(f"{args.manifest}: not a cellalign manifest") from None
    for path, digest in inputs.items():
        p = Path(path) if Path(path).is_absolute() else cwd / path
        if not p.exists():
            raise IoError(f"recorded input {path} is missing")
        if file_sha256(p) != digest:
            raise IoError(f"recorded input {path} changed since the manifest was written")
    if args.out is not None:
        recorded = _replace_out(recorded, str(args.out))
    return run(recorded, cwd=cwd)


def _replace_out(argv: list[str], out: str) -> list[str]:
    result = list(argv)
    for i, tok in enumerate(result):
        if tok == "--out" and i + 1 < len(result):
            result[i + 1] = out
            return result
        if tok.startswith("--out="):
            result[i] = f"--out={out}"
            return result
    return result + ["--out", out]


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellalign", description="Cell-level alignment of paired tissue sections.")
    parser.add_argument("--version", action="version", version=f"cellalign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("align", help="align source cells onto target cells")
    p.add_argument("source", type=Path)
    p.add_argument("target", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_schema_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="landmark accuracy of an estimated transform")
    p.add_argument("landmarks", type=Path)
    p.add_argument("estimated", type=Path)
    p.add_argument("--gt", type=Path, default=None, help="ground-truth transform (default: rigid fit to the landmarks)")
    p.add_argument("--out", type=Path, default=None, help="write the report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic source/target pair with ground truth")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-points", type=int, default=1000)
    p.add_argument("--extent", type=float, default=500.0)
    p.add_argument("--clusters", type=int, default=0)
    p.add_argument("--cluster-sigma", type=float, default=15.0)
    p.add_argument("--theta-deg", type=float, default=0.0)
    p.add_argument("--dx", type=float, default=0.0)
    p.add_argument("--dy", type=float, default=0.0)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--spurious", type=float, default=0.0)
    p.add_argument("--feature-noise", type=float, default=0.0)
    p.add_argument("--min-spacing", type=float, default=0.0)
    p.add_argument("--tumor-fraction", type=float, default=0.0)
    p.add_argument("--landmarks", type=int, default=8, help="number of truth landmarks to export")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("concordance", help="feature and regional concordance after alignment")
    p.add_argument("source", type=Path)
    p.add_argument("target", type=Path)
    p.add_argument("transform", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--radius", type=float, default=None,
                   help="pairing radius in um (default: half the median target spacing; <= 0 for unbounded)")
    p.add_argument("--feature", action="append", metavar="SRC[:TGT]",
                   help="feature pair to correlate; repeatable (default: all shared features)")
    p.add_argument("--positive-label", default=None, help="class label counted for regional composition")
    p.add_argument("--grid-size", type=float, default=100.0)
    p.add_argument("--svg", action="store_true", help="also render SVG scatter plots and heatmap")
    _add_schema_flags(p)
    p.set_defaults(func=cmd_concordance)

    p = sub.add_parser("supercell", help="bin cells into super-cells")
    p.add_argument("cells", type=Path)
    p.add_argument("--grid-size", type=float, default=100.0)
    p.add_argument("--out", type=Path, required=True)
    _add_schema_flags(p)
    p.set_defaults(func=cmd_supercell)

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, default=None, help="write into this directory instead")
    p.set_defaults(func=cmd_rerun)
    return parser


def run(argv: Sequence[str], cwd: Path | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(list(argv))
    if cwd is not None:
        for key, value in vars(args).items():
            if isinstance(value, Path) and not value.is_absolute():
                setattr(args, key, cwd / value)
    try:
        return args.func(args, list(argv))
    except CellAlignError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main(argv: Sequence[str] | None = None) -> int:
    return run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
