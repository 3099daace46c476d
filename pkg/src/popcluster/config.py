"""Run configuration: a flat ``key = value`` text format.

Grammar (see docs/CONFIG.md for every key)::

    line    := blank | comment | entry
    comment := '#' ...
    entry   := key '=' value [ '#' ... ]
    key     := dotted identifier, e.g. ``sweep.k_max`` or ``subject.P1.matrix``

Keys may appear in any order; a repeated key is an error. Lists are
comma-separated; ``a:b:c`` in an integer list expands to ``range(a, b+1, c)``.
Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import ColumnKind, DataError
from .diagnostics import DiagnosticsConfig
from .gmm import EmOptions

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*(\.[A-Za-z0-9_\-]+)*$")


class ConfigError(ValueError):
    pass


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not _KEY.match(key):
            raise ConfigError(f"{source}:{lineno}: invalid key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_text(entries: dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in entries.items())


def _list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _int_list(value: str) -> tuple[int, ...]:
    out: list[int] = []
    for item in _list(value):
        if ":" in item:
            parts = [int(p) for p in item.split(":")]
            if len(parts) != 3 or parts[2] <= 0:
                raise ConfigError(f"bad range {item!r}; use start:stop:step")
            out.extend(range(parts[0], parts[1] + 1, parts[2]))
        else:
            out.append(int(item))
    return tuple(out)


def _bool(value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


@dataclass(frozen=True)
class SubjectEntry:
    id: str
    matrix: Path
    truth: Path | None = None


@dataclass(frozen=True)
class RatingEntry:
    name: str
    path: Path
    default_kind: ColumnKind
    kinds: dict[str, ColumnKind]


@dataclass(frozen=True)
class RunConfig:
    subjects: tuple[SubjectEntry, ...]
    ratings: tuple[RatingEntry, ...]
    seed: int
    output_dir: Path
    variance_threshold: float = 0.95
    shared_d_mode: str = "max"
    k_min: int = 1
    k_max: int = 30
    n_init: int = 100
    n_refit: int = 10
    gmm: EmOptions = field(default_factory=EmOptions)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    run_diagnostics: bool = True
    threads: int | None = None
    region_file: Path | None = None
    regions: tuple[str, ...] = ()
    entries: dict[str, str] = field(default_factory=dict)

    def echo(self) -> dict[str, str]:
        """The parsed key/value pairs after command-line overrides."""
        return dict(sorted(self.entries.items()))


_KNOWN_PREFIXES = ("subject.", "rating.")
_KNOWN = {
    "seed", "output_dir", "threads", "subjects", "ratings",
    "pca.variance_threshold", "pca.shared_d_mode",
    "sweep.k_min", "sweep.k_max", "sweep.n_init", "stability.n_refit",
    "gmm.max_iter", "gmm.tol", "gmm.reg_covar",
    "diagnostics.enabled", "diagnostics.sample_sizes", "diagnostics.n_iter",
    "diagnostics.top_vectors", "diagnostics.test_n", "diagnostics.train_sizes",
    "diagnostics.d_rule", "diagnostics.seed",
    "interpret.region_file", "interpret.regions",
}


def build(entries: dict[str, str], base_dir: Path, check_paths: bool = True) -> RunConfig:
    unknown = [k for k in entries if k not in _KNOWN and not k.startswith(_KNOWN_PREFIXES)]
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")
    if "seed" not in entries:
        raise ConfigError("seed is mandatory")

    def path(value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else (base_dir / p)

    def need(key: str) -> str:
        try:
            return entries[key]
        except KeyError:
            raise ConfigError(f"missing key {key}") from None

    try:
        seed = int(entries["seed"])
        if seed < 0 or seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        subjects = []
        for sid in _list(need("subjects")):
            truth = entries.get(f"subject.{sid}.truth")
            subjects.append(
                SubjectEntry(sid, path(need(f"subject.{sid}.matrix")), path(truth) if truth else None)
            )
        if not subjects:
            raise ConfigError("at least one subject is required")
        if len({s.id for s in subjects}) != len(subjects):
            raise ConfigError("duplicate subject id")
        ratings = []
        for name in _list(entries.get("ratings", "")):
            prefix = f"rating.{name}.column."
            kinds = {
                k[len(prefix):]: ColumnKind.parse(v) for k, v in entries.items() if k.startswith(prefix)
            }
            ratings.append(
                RatingEntry(
                    name,
                    path(need(f"rating.{name}.path")),
                    ColumnKind.parse(entries.get(f"rating.{name}.kind", "continuous")),
                    kinds,
                )
            )
        diag_defaults = DiagnosticsConfig()
        d_rule_text = entries.get("diagnostics.d_rule")
        if d_rule_text is None:
            d_rule = diag_defaults.d_rule
        elif "." in d_rule_text or "e" in d_rule_text.lower():
            d_rule = float(d_rule_text)
        else:
            d_rule = int(d_rule_text)
        diagnostics = DiagnosticsConfig(
            sample_sizes=_int_list(entries["diagnostics.sample_sizes"])
            if "diagnostics.sample_sizes" in entries else diag_defaults.sample_sizes,
            n_iter=int(entries.get("diagnostics.n_iter", diag_defaults.n_iter)),
            top_vectors=int(entries.get("diagnostics.top_vectors", diag_defaults.top_vectors)),
            test_n=int(entries.get("diagnostics.test_n", diag_defaults.test_n)),
            train_sizes=_int_list(entries["diagnostics.train_sizes"])
            if "diagnostics.train_sizes" in entries else diag_defaults.train_sizes,
            seed=int(entries.get("diagnostics.seed", seed)),
            d_rule=d_rule,
        )
        gmm = EmOptions(
            max_iter=int(entries.get("gmm.max_iter", 200)),
            tol=float(entries.get("gmm.tol", 1e-4)),
            reg_covar=float(entries.get("gmm.reg_covar", 1e-6)),
        )
        threads = int(entries["threads"]) if "threads" in entries else None
        region_file = path(entries["interpret.region_file"]) if "interpret.region_file" in entries else None
        cfg = RunConfig(
            subjects=tuple(subjects),
            ratings=tuple(ratings),
            seed=seed,
            output_dir=path(entries.get("output_dir", "out")),
            variance_threshold=float(entries.get("pca.variance_threshold", 0.95)),
            shared_d_mode=entries.get("pca.shared_d_mode", "max"),
            k_min=int(entries.get("sweep.k_min", 1)),
            k_max=int(entries.get("sweep.k_max", 30)),
            n_init=int(entries.get("sweep.n_init", 100)),
            n_refit=int(entries.get("stability.n_refit", 10)),
            gmm=gmm,
            diagnostics=diagnostics,
            run_diagnostics=_bool(entries.get("diagnostics.enabled", "true")),
            threads=threads,
            region_file=region_file,
            regions=tuple(_list(entries.get("interpret.regions", ""))),
            entries=dict(entries),
        )
    except (ValueError, DataError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc

    if not 0 < cfg.variance_threshold <= 1:
        raise ConfigError("pca.variance_threshold must be in (0, 1]")
    if cfg.shared_d_mode not in ("max", "max-over-subjects", "per-subject"):
        raise ConfigError(f"unknown pca.shared_d_mode {cfg.shared_d_mode!r}")
    if cfg.k_min < 1 or cfg.k_max < cfg.k_min:
        raise ConfigError(f"invalid K grid {cfg.k_min}..{cfg.k_max}")
    if cfg.n_init < 1 or cfg.n_refit < 2:
        raise ConfigError("sweep.n_init must be >= 1 and stability.n_refit >= 2")
    if cfg.threads is not None and cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.regions and cfg.region_file is None:
        raise ConfigError("interpret.regions requires interpret.region_file")
    if check_paths:
        missing = [str(s.matrix) for s in cfg.subjects if not s.matrix.exists()]
        missing += [str(s.truth) for s in cfg.subjects if s.truth and not s.truth.exists()]
        missing += [str(r.path) for r in cfg.ratings if not r.path.exists()]
        if cfg.region_file and not cfg.region_file.exists():
            missing.append(str(cfg.region_file))
        if missing:
            raise ConfigError(f"missing input files: {', '.join(missing)}")
    return cfg


def load(path, overrides: dict[str, str] | None = None, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    entries = parse_text(text, str(path))
    entries.update(overrides or {})
    return build(entries, path.parent, check_paths)
