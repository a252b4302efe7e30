"""Command-line surface: single-pair explanation, dataset evaluation,
and the tap-layer sweep.

Configuration precedence is CLI flags, then the optional config file
(ini-style key=value sections), then the PAIRX_THREADS environment
variable for the thread count, then built-in defaults.

Exit codes: 0 success, 2 input/IO problem, 3 numerical degeneracy,
4 contract violation (bad flags or preconditions).
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from pathlib import Path

from .errors import ContractError, DegenerateError, InputError, PairxError
from .pipeline import (
    RunConfig,
    default_thread_count,
    dump_json,
    evaluate_dataset,
    explain_pair,
    open_model,
    resolve_layer,
    sweep_layers,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3
EXIT_CONTRACT = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are contract violations
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="pairx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--model", help="path to the PXW1 weight container")
        p.add_argument("--layer", help="tap layer index or 'auto'")
        p.add_argument("--n-matches", type=int, dest="n_matches",
                       help="matches kept after relevance filtering (default 20)")
        p.add_argument("--manifest", help="JSON-lines dataset manifest")
        p.add_argument("--correspondences",
                       help="correspondence JSON file or directory")
        p.add_argument("--out", help="output directory (default ./out)")
        p.add_argument("--seed", type=int, help="rng seed (default 0)")
        p.add_argument("--threads", type=int,
                       help="worker threads (default: machine parallelism; "
                            "env PAIRX_THREADS as fallback)")
        p.add_argument("--ransac-threshold", type=float, dest="ransac_threshold",
                       help="inlier threshold in pixels (default 2.0)")
        p.add_argument("--ransac-max-iters", type=int, dest="ransac_max_iters",
                       help="RANSAC iteration cap (default 2000)")
        p.add_argument("--pair-target", type=int, dest="pair_target",
                       help="pairs sampled per class for evaluation (default 1000)")
        p.add_argument("--config", help="ini-style config file")

    p_explain = sub.add_parser("explain", help="explain one image pair")
    add_common(p_explain)
    p_explain.add_argument("image_a")
    p_explain.add_argument("image_b")

    p_eval = sub.add_parser("eval", help="evaluate a dataset")
    add_common(p_eval)

    p_sweep = sub.add_parser("sweep-layers", help="rank tap layers by metric correlation")
    add_common(p_sweep)
    return parser


_CONFIG_KEYS = {
    "run": {
        "model": ("model_path", str),
        "layer": ("layer", str),
        "n_matches": ("n_matches", int),
        "manifest": ("manifest_path", str),
        "correspondences": ("correspondence_path", str),
        "out": ("output_dir", str),
        "seed": ("rng_seed", int),
        "threads": ("thread_count", int),
        "pair_target": ("pair_target", int),
        "k_init": ("k_init", int),
        "k_cap": ("k_cap", int),
    },
    "ransac": {
        "threshold": ("ransac_threshold", float),
        "max_iters": ("ransac_max_iters", int),
    },
}


def _load_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    parser.read(p)
    values = {}
    for section, keys in _CONFIG_KEYS.items():
        if section not in parser:
            continue
        for key, raw in parser[section].items():
            if key not in keys:
                raise ContractError(f"unknown config key [{section}] {key}")
            attr, cast = keys[key]
            values[attr] = cast(raw)
    return values


def _coerce_layer(value):
    if value is None or value == "auto":
        return value
    try:
        return int(value)
    except ValueError as exc:
        raise ContractError(f"layer must be an integer or 'auto', got {value!r}") from exc


def build_config(args: argparse.Namespace) -> RunConfig:
    """flags > config file > PAIRX_THREADS > defaults."""
    config = RunConfig()
    file_values = _load_config_file(args.config) if args.config else {}
    for attr, value in file_values.items():
        setattr(config, attr, value)
    flag_map = {
        "model": "model_path",
        "layer": "layer",
        "n_matches": "n_matches",
        "manifest": "manifest_path",
        "correspondences": "correspondence_path",
        "out": "output_dir",
        "seed": "rng_seed",
        "threads": "thread_count",
        "ransac_threshold": "ransac_threshold",
        "ransac_max_iters": "ransac_max_iters",
        "pair_target": "pair_target",
    }
    flags_set = set()
    for flag, attr in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config, attr, value)
            flags_set.add(attr)
    if "thread_count" not in flags_set and "thread_count" not in file_values:
        env = os.environ.get("PAIRX_THREADS")
        if env:
            try:
                config.thread_count = int(env)
            except ValueError as exc:
                raise ContractError(f"PAIRX_THREADS must be an integer, got {env!r}") from exc
    config.layer = _coerce_layer(config.layer)
    config.validate()
    if not config.model_path:
        raise ContractError("a model container is required (--model)")
    return config


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_explain(config: RunConfig, image_a: str, image_b: str) -> int:
    model = open_model(config.model_path)
    layer = None
    if config.layer == "auto":
        manifest = None
        if config.manifest_path:
            from .stats import load_manifest

            manifest = load_manifest(config.manifest_path)
        corr = None
        if config.correspondence_path:
            from .geometry import load_correspondences

            corr = load_correspondences(config.correspondence_path)
        layer = resolve_layer(model, config, manifest, corr)
    for path in (image_a, image_b):
        if not Path(path).is_file():
            raise InputError(f"image file not found: {path}")
    result = explain_pair(model, image_a, image_b, config, layer=layer)
    out = _out_dir(config)
    stem = f"{Path(image_a).stem}__{Path(image_b).stem}"
    png_path = out / f"{stem}.png"
    png_path.write_bytes(result.png_bytes)
    dump_json(result.sidecar, out / f"{stem}.json")
    print(f"cosine_similarity: {result.cosine:.6f}")
    print(f"matches_kept: {result.n_matches}")
    print(f"wrote {png_path}")
    return EXIT_OK


def cmd_eval(config: RunConfig) -> int:
    model = open_model(config.model_path)
    report = evaluate_dataset(model, config)
    out = _out_dir(config)
    dump_json(report, out / "report.json")
    agg = report["aggregate"]
    for key in ("rho_res", "delta_res", "rho_mc", "delta_mc"):
        value = agg[key]
        print(f"{key}: {'missing' if value is None else f'{value:.4f}'}")
    print(f"pairs: {agg['n_correct']} correct / {agg['n_incorrect']} incorrect")
    print(f"wrote {out / 'report.json'}")
    return EXIT_OK


def cmd_sweep_layers(config: RunConfig) -> int:
    model = open_model(config.model_path)
    table = sweep_layers(model, config)
    out = _out_dir(config)
    dump_json(table, out / "sweep.json")
    print(f"{'layer':>5}  {'rho_res':>8}  {'pairs':>5}  selected")
    for row in table["rows"]:
        rho = "missing" if row["rho_res"] is None else f"{row['rho_res']:.4f}"
        mark = "*" if row["selected"] else ""
        print(f"{row['layer']:>5}  {rho:>8}  {row['n_pairs']:>5}  {mark}")
    print(f"wrote {out / 'sweep.json'}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = build_config(args)
        if args.command == "explain":
            return cmd_explain(config, args.image_a, args.image_b)
        if args.command == "eval":
            return cmd_eval(config)
        if args.command == "sweep-layers":
            return cmd_sweep_layers(config)
        raise ContractError(f"unknown command {args.command!r}")
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DegenerateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except PairxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
