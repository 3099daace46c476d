"""Command-line entry point: ``popcluster <subcommand> --config PATH``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import dataset, pipeline, synth
from .config import ConfigError

logger = logging.getLogger("popcluster")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_COMPUTE = 3

STAGE_SYNTH = 3


class ValidationFailure(Exception):
    pass


def _load_config(args) -> config_mod.RunConfig:
    overrides = {}
    if args.output_dir is not None:
        overrides["output_dir"] = str(Path(args.output_dir).resolve())
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return config_mod.load(args.config, overrides)


def _prepare(args):
    try:
        cfg = _load_config(args)
        matrices = pipeline.load_matrices(cfg)
        pipeline.validate(cfg, matrices)
    except (ConfigError, dataset.DataError, ValueError, OSError) as exc:
        raise ValidationFailure(str(exc)) from exc
    layout = pipeline.Layout(cfg.output_dir)
    layout.root.mkdir(parents=True, exist_ok=True)
    return cfg, matrices, layout


def _embeddings(cfg, matrices, layout):
    try:
        return pipeline.embed(cfg, matrices, layout)
    except pipeline.MissingArtifact as exc:
        raise ValidationFailure(str(exc)) from exc


def cmd_pipeline(args) -> int:
    try:
        cfg = _load_config(args)
        matrices = pipeline.load_matrices(cfg)
        pipeline.validate(cfg, matrices)
    except (ConfigError, dataset.DataError, ValueError, OSError) as exc:
        raise ValidationFailure(str(exc)) from exc
    report = pipeline.run_all(cfg)
    for sid, s in report["subjects"].items():
        logger.info("%s: K=%d, mean Rand %.4f", sid, s["chosen_k"], s.get("stability", {}).get("mean_rand", float("nan")))
    print(pipeline.Layout(cfg.output_dir).report)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, matrices, layout = _prepare(args)
    pipeline.run_pca(cfg, matrices, layout)
    embeddings = pipeline.embed(cfg, matrices, layout)
    pipeline.run_sweep(cfg, embeddings, layout, pipeline.resolve_threads(cfg))
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg, matrices, layout = _prepare(args)
    embeddings = _embeddings(cfg, matrices, layout)
    for s in cfg.subjects:
        if not layout.bic_curve(s.id).exists():
            raise ValidationFailure(f"expected upstream artifact {layout.bic_curve(s.id)}")
    pipeline.run_fit(cfg, matrices, embeddings, layout)
    return EXIT_OK


def cmd_stability(args) -> int:
    cfg, matrices, layout = _prepare(args)
    embeddings = _embeddings(cfg, matrices, layout)
    for s in cfg.subjects:
        if not layout.fit(s.id).exists():
            raise ValidationFailure(f"expected upstream artifact {layout.fit(s.id)}")
    pipeline.run_stability(cfg, embeddings, layout, pipeline.resolve_threads(cfg))
    return EXIT_OK


def cmd_interpret(args) -> int:
    cfg, _, layout = _prepare(args)
    for s in cfg.subjects:
        for p in (layout.labels(s.id), layout.fit(s.id), layout.pca(s.id)):
            if not p.exists():
                raise ValidationFailure(f"expected upstream artifact {p}")
    summary = pipeline.run_interpret(cfg, layout)
    (layout.interpret / "summary.json").write_text(
        json.dumps(pipeline._json_safe(summary), indent=2) + "\n", encoding="utf-8"
    )
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg, matrices, layout = _prepare(args)
    pipeline.run_diagnostics(cfg, matrices, layout)
    return EXIT_OK


_SYNTH_KEYS = {
    "k_true": int, "n": int, "d_low": int, "m": int, "separation": float,
    "within_sd": float, "noise_sd": float,
}


def cmd_synth(args) -> int:
    """Write one synthetic subject per ``synth.subjects`` entry, shared rating
    tables, and a ready-to-run ``pipeline.cfg`` next to them."""
    try:
        path = Path(args.config)
        entries = config_mod.parse_text(path.read_text(encoding="utf-8"), str(path))
        if args.seed is not None:
            entries["seed"] = str(args.seed)
        if "seed" not in entries:
            raise ConfigError("seed is mandatory")
        seed = int(entries["seed"])
        out = Path(args.output_dir or entries.get("output_dir", "synth_out"))
        if not out.is_absolute() and args.output_dir is None:
            out = path.parent / out
        subjects = config_mod._list(entries.get("synth.subjects", "S1"))
        spec_kw = {k: conv(entries[f"synth.{k}"]) for k, conv in _SYNTH_KEYS.items() if f"synth.{k}" in entries}
        if "synth.weights" in entries:
            spec_kw["weights"] = tuple(float(v) for v in config_mod._list(entries["synth.weights"]))
        with_ratings = config_mod._bool(entries.get("synth.ratings", "true"))
        passthrough = {k[len("pipeline."):]: v for k, v in entries.items() if k.startswith("pipeline.")}
        unknown = [
            k for k in entries
            if k not in ("seed", "output_dir", "synth.subjects", "synth.weights", "synth.ratings")
            and not k.startswith("pipeline.")
            and k[len("synth."):] not in _SYNTH_KEYS
        ]
        if unknown:
            raise ConfigError(f"unknown synth keys: {', '.join(sorted(unknown))}")
        specs = {
            sid: synth.SynthSpec(**spec_kw, seed=pipeline.stage_seed(seed, sid, STAGE_SYNTH))
            for sid in subjects
        }
    except (ConfigError, synth.SynthError, ValueError, OSError) as exc:
        raise ValidationFailure(str(exc)) from exc

    out.mkdir(parents=True, exist_ok=True)
    cfg_entries: dict[str, object] = {"seed": seed, "output_dir": "results", "subjects": ", ".join(subjects)}
    echo: dict[str, object] = {"seed": seed}
    trial_ids = None
    for sid, spec in specs.items():
        data = synth.generate(spec)
        trial_ids = data.x.trial_ids
        (out / sid).mkdir(exist_ok=True)
        dataset.save_matrix_binary(data.x, out / sid / "matrix.pcm1")
        pipeline.write_csv(out / sid / "truth.csv", ["trial_id", "label"], zip(trial_ids, data.true_labels.tolist()))
        cfg_entries[f"subject.{sid}.matrix"] = f"{sid}/matrix.pcm1"
        cfg_entries[f"subject.{sid}.truth"] = f"{sid}/truth.csv"
        for k, v in spec.to_dict().items():
            echo[f"synth.{sid}.{k}"] = "uniform" if v is None else (", ".join(map(str, v)) if isinstance(v, tuple) else v)
    if with_ratings:
        rng = np.random.default_rng(pipeline.stage_seed(seed, "ratings", STAGE_SYNTH))
        n = len(trial_ids)
        emotion = dataset.RatingsTable(
            trial_ids, ("amusement", "fear", "awe"), (dataset.ColumnKind("continuous", 0, 100),) * 3,
            np.round(rng.uniform(0, 100, size=(n, 3)), 2),
        )
        design = dataset.RatingsTable(
            trial_ids, ("session", "run"), (dataset.ColumnKind("discrete"),) * 2,
            np.column_stack([rng.integers(0, 5, n), rng.integers(0, 8, n)]),
        )
        dataset.save_ratings_csv(emotion, out / "ratings_emotion.csv")
        dataset.save_ratings_csv(design, out / "ratings_design.csv")
        cfg_entries.update({
            "ratings": "emotion, design",
            "rating.emotion.path": "ratings_emotion.csv",
            "rating.emotion.kind": "continuous 0 100",
            "rating.design.path": "ratings_design.csv",
            "rating.design.kind": "discrete",
        })
    cfg_entries.update(passthrough)
    (out / "synth_spec.cfg").write_text(config_mod.format_text(echo), encoding="utf-8")
    (out / "pipeline.cfg").write_text(config_mod.format_text(cfg_entries), encoding="utf-8")
    print(out / "pipeline.cfg")
    return EXIT_OK


COMMANDS = {
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
    "fit": cmd_fit,
    "stability": cmd_stability,
    "interpret": cmd_interpret,
    "diagnose": cmd_diagnose,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popcluster", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value config file")
        p.add_argument("--output-dir", default=None, help="overrides output_dir")
        p.add_argument("--seed", type=int, default=None, help="overrides seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ValidationFailure as exc:
        logger.error("validation failed: %s", exc)
        return EXIT_VALIDATION
    except pipeline.MissingArtifact as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except Exception as exc:
        logger.error("%s", exc)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
