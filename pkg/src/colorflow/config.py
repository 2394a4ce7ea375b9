"""Run configuration and dataset manifests, both stored as line-oriented text.

Config files::

    # colorflow-config 1
    hidden = 64
    flow_iters = 10000

Manifests::

    colorflow-manifest 1
    hidden 64
    id<TAB>image<TAB>weights<TAB>iterations<TAB>final_loss<TAB>seed<TAB>status
    ...one tab-separated row per entry; paths relative to the manifest...
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import FormatError, ImageIOError, ValidationError
from .flow import FlowArch

CONFIG_SCHEMA = 1
MANIFEST_SCHEMA = 1
_MANIFEST_COLUMNS = ["id", "image", "weights", "iterations", "final_loss", "seed", "status"]


@dataclass
class RunConfig:
    seed: int = 0
    # per-image flows
    hidden: int = 1024
    flow_iters: int = 100_000
    flow_lr: float = 5e-4
    flow_batch: int = 4096
    # transfer
    steps: int = 8
    strength: float = 1.0
    blend: float = 1.0
    tile_size: int = 2**20
    threads: int = 1
    # encoder
    encoder_input: int = 64
    encoder_widths: str = "16,32,64,128"
    encoder_iters: int = 20_000
    encoder_lr: float = 5e-4
    encoder_lr_drop: float = 1e-4
    encoder_drop_at: int = 10_000
    batch_images: int = 8
    pixels_per_image: int = 1024
    distill_steps: int = 32
    target_mode: str = "displacement"
    checkpoint_every: int = 1000
    log_every: int = 100
    # metrics
    style_samples: int = 6000
    projections: int = 128
    lipschitz_pairs: int = 1000
    lipschitz_radius: float = 1.0 / 255.0
    ideal_point: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = [
            "hidden", "flow_iters", "flow_batch", "steps", "tile_size", "threads", "encoder_input",
            "encoder_iters", "batch_images", "pixels_per_image", "distill_steps", "checkpoint_every",
            "log_every", "style_samples", "projections", "lipschitz_pairs",
        ]  # fmt: skip
        for name in positive:
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("flow_lr", "encoder_lr", "encoder_lr_drop", "lipschitz_radius"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        for name in ("strength", "blend"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.encoder_drop_at < 0:
            raise ValidationError("encoder_drop_at must be >= 0")
        if self.target_mode not in ("displacement", "velocity"):
            raise ValidationError("target_mode must be 'displacement' or 'velocity'")
        self.widths()

    def widths(self) -> tuple[int, ...]:
        try:
            ws = tuple(int(w) for w in self.encoder_widths.split(","))
        except ValueError:
            raise ValidationError(f"bad encoder_widths {self.encoder_widths!r}") from None
        if not ws or min(ws) < 1:
            raise ValidationError("encoder_widths must be positive integers")
        return ws

    def updated(self, **overrides) -> RunConfig:
        clean = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **clean)

    def to_text(self) -> str:
        lines = [f"# colorflow-config {CONFIG_SCHEMA}"]
        lines += [f"{f.name} = {getattr(self, f.name)!r}".replace("'", "") for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if line.startswith("# colorflow-config"):
                version = int(line.split()[-1])
                if version != CONFIG_SCHEMA:
                    raise FormatError(f"unsupported config schema {version}")
                continue
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in types:
                raise FormatError(f"config line {lineno}: unknown or malformed entry {raw!r}")
            values[key] = _coerce(types[key], value, key)
        return cls(**values)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise ImageIOError(f"cannot read config {path}: {exc}") from exc


def _coerce(type_name, value: str, key: str):
    name = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if name == "int":
            return int(value)
        if name == "float":
            return float(value)
        return value
    except ValueError:
        raise FormatError(f"config {key}: cannot parse {value!r} as {name}") from None


@dataclass
class ManifestEntry:
    id: str
    image: str
    weights: str
    iterations: int = 0
    final_loss: float | None = None
    seed: int = 0
    status: str = "ok"


@dataclass
class Manifest:
    arch: FlowArch
    entries: list[ManifestEntry] = field(default_factory=list)
    version: int = MANIFEST_SCHEMA

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("manifest image ids must be unique")

    def to_text(self) -> str:
        lines = [f"colorflow-manifest {self.version}", f"hidden {self.arch.hidden}", "\t".join(_MANIFEST_COLUMNS)]
        for e in self.entries:
            loss = "-" if e.final_loss is None else repr(e.final_loss)
            row = [e.id, e.image, e.weights, str(e.iterations), loss, str(e.seed), e.status]
            if any("\t" in c or "\n" in c for c in row):
                raise ValidationError(f"manifest fields may not contain tabs/newlines: {e.id!r}")
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> Manifest:
        lines = text.splitlines()
        if len(lines) < 3:
            raise FormatError("manifest too short")
        head = lines[0].split()
        if len(head) != 2 or head[0] != "colorflow-manifest":
            raise FormatError("missing manifest header")
        version = int(head[1])
        if version != MANIFEST_SCHEMA:
            raise FormatError(f"unsupported manifest schema {version}")
        key, _, hidden = lines[1].partition(" ")
        if key != "hidden":
            raise FormatError("manifest line 2 must be 'hidden <H>'")
        if lines[2].split("\t") != _MANIFEST_COLUMNS:
            raise FormatError("unexpected manifest columns")
        entries = []
        for lineno, line in enumerate(lines[3:], 4):
            if not line.strip():
                continue
            cells = line.split("\t")
            if len(cells) != len(_MANIFEST_COLUMNS):
                raise FormatError(f"manifest line {lineno}: expected {len(_MANIFEST_COLUMNS)} fields")
            try:
                entries.append(
                    ManifestEntry(
                        cells[0], cells[1], cells[2], int(cells[3]),
                        None if cells[4] == "-" else float(cells[4]), int(cells[5]), cells[6],
                    )  # fmt: skip
                )
            except ValueError as exc:
                raise FormatError(f"manifest line {lineno}: {exc}") from exc
        return cls(FlowArch(int(hidden)), entries, version)

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_text())
        tmp.replace(path)

    @classmethod
    def read(cls, path) -> Manifest:
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise ImageIOError(f"cannot read manifest {path}: {exc}") from exc
