"""Plain-text checkpoint format.

    SCMIL-CKPT v1
    <tensor count>
    <name> <rows> <cols>
    <rows lines of cols space-separated floats>
    ...
    # key=value            (config echo, optional, trailing)

Floats are written with ``repr`` (shortest round-trip form), so loading a
saved file and saving it again reproduces it byte for byte. Vectors are
stored as 1 x n, scalars as 1 x 1; ``model_from_checkpoint`` restores the
original shapes from the freshly built model.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .mil import MilModel, build_model

MAGIC = "SCMIL-CKPT v1"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict[str, str] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if list(self.tensors) != list(other.tensors) or self.config != other.config:
            return False
        return all(a.shape == other.tensors[k].shape and a.tobytes() == other.tensors[k].tobytes()
                   for k, a in self.tensors.items())


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim == 2:
        return a
    raise ValueError(f"cannot store a {a.ndim}-d tensor")


def dumps(ckpt: Checkpoint) -> str:
    lines = [MAGIC, str(len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} must be non-empty without whitespace")
        a = _as_2d(arr)
        lines.append(f"{name} {a.shape[0]} {a.shape[1]}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in a)
    for key, value in ckpt.config.items():
        text = str(value)
        if "\n" in text or "=" in str(key):
            raise ValueError(f"config entry {key!r} cannot be serialised")
        lines.append(f"# {key}={text}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> Checkpoint:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    else:
        raise FormatError("file does not end with a newline (truncated?)", lineno=len(lines))
    if not lines or lines[0] != MAGIC:
        raise FormatError(f"expected header {MAGIC!r}", lineno=1)
    if len(lines) < 2:
        raise FormatError("missing tensor count", lineno=2)
    try:
        count = int(lines[1])
    except ValueError:
        raise FormatError(f"bad tensor count {lines[1]!r}", lineno=2) from None
    if count < 0:
        raise FormatError("negative tensor count", lineno=2)
    tensors: dict[str, np.ndarray] = {}
    i = 2
    for _ in range(count):
        if i >= len(lines) or lines[i].startswith("#"):
            raise FormatError(f"header says {count} tensors, found {len(tensors)}", lineno=i + 1)
        parts = lines[i].split(" ")
        if len(parts) != 3:
            raise FormatError(f"bad tensor header {lines[i]!r}", lineno=i + 1)
        name = parts[0]
        try:
            rows, cols = int(parts[1]), int(parts[2])
        except ValueError:
            raise FormatError(f"bad tensor shape in {lines[i]!r}", lineno=i + 1) from None
        if rows < 1 or cols < 1:
            raise FormatError(f"tensor {name} has empty shape", lineno=i + 1)
        if name in tensors:
            raise FormatError(f"duplicate tensor {name}", lineno=i + 1)
        i += 1
        data = np.empty((rows, cols))
        for r in range(rows):
            if i >= len(lines):
                raise FormatError(f"tensor {name} truncated after {r} rows", lineno=i + 1)
            fields = lines[i].split(" ")
            if len(fields) != cols:
                raise FormatError(f"tensor {name} row {r} has {len(fields)} values, expected {cols}",
                                  lineno=i + 1)
            try:
                data[r] = [float(v) for v in fields]
            except ValueError as err:
                raise FormatError(f"tensor {name}: {err}", lineno=i + 1) from None
            i += 1
        tensors[name] = data
    config: dict[str, str] = {}
    for j in range(i, len(lines)):
        line = lines[j]
        if not line.startswith("# ") or "=" not in line:
            raise FormatError(f"unexpected content after {count} tensors: {line[:40]!r}", lineno=j + 1)
        key, value = line[2:].split("=", 1)
        config[key] = value
    return Checkpoint(tensors, config)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_text(dumps(ckpt), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_text(encoding="utf-8"))


def checkpoint_from_model(model: MilModel, extra_config: dict | None = None,
                          history: list[dict] | None = None) -> Checkpoint:
    """Snapshot model parameters; ``history`` rows become a ``history`` tensor."""
    tensors = {name: _as_2d(arr).copy() for name, arr in model.named_parameters().items()}
    config = {f"model.{k}": str(v) for k, v in model.config().items()}
    if history:
        cols = ["epoch", "lr", "train_loss", "val_accuracy", "val_auc"]
        tensors["history"] = np.array([[float(row[c]) for c in cols] for row in history])
        config["history.columns"] = ",".join(cols)
    for k, v in (extra_config or {}).items():
        config[k] = str(v)
    return Checkpoint(tensors, config)


def _parse_value(text: str):
    if text in ("True", "False"):
        return text == "True"
    try:
        return int(text)
    except ValueError:
        return text


def model_from_checkpoint(ckpt: Checkpoint) -> MilModel:
    cfg = {k[len("model."):]: _parse_value(v) for k, v in ckpt.config.items() if k.startswith("model.")}
    if "variant" not in cfg:
        raise FormatError("checkpoint carries no model.variant config")
    model = build_model(**cfg)
    for name, arr in model.named_parameters().items():
        if name not in ckpt.tensors:
            raise FormatError(f"checkpoint lacks tensor {name}")
        src = ckpt.tensors[name]
        if src.size != arr.size:
            raise FormatError(f"tensor {name} has {src.size} values, model expects {arr.size}")
        arr[...] = src.reshape(arr.shape)
    return model
