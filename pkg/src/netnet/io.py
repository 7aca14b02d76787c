"""On-disk formats: checkpoints, detection/GT json, metric CSVs.

Checkpoint layout::

    netnet-checkpoint 1
    <name> <dim0>x<dim1>x...      (one line per parameter, in model order)
    end
    <raw little-endian float64 values, concatenated in the same order>
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .boxes import Detection, GroundTruthBox

MAGIC = "netnet-checkpoint 1"


class FormatError(ValueError):
    pass


def fmt(x) -> str:
    """Fixed 9-significant-digit rendering; NaN prints as ``absent``."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "absent"
    return f"{x:.9g}"


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, named: dict) -> None:
    lines = [MAGIC]
    for name, p in named.items():
        if any(c.isspace() for c in name):
            raise FormatError(f"parameter name {name!r} contains whitespace")
        lines.append(f"{name} {'x'.join(map(str, p.data.shape))}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for p in named.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    header, sep, body = raw.partition(b"\nend\n")
    if not sep:
        raise FormatError("checkpoint header is not terminated")
    lines = header.decode("ascii").split("\n")
    if lines[0] != MAGIC:
        raise FormatError("not a checkpoint file")
    out, off = {}, 0
    for line in lines[1:]:
        try:
            name, shape_s = line.rsplit(" ", 1)
            shape = tuple(int(d) for d in shape_s.split("x")) if shape_s else ()
        except ValueError as e:
            raise FormatError(f"bad checkpoint header line {line!r}") from e
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if off + n > len(body):
            raise FormatError(f"checkpoint truncated at {name}")
        out[name] = np.frombuffer(body[off:off + n], dtype="<f8").reshape(shape).astype(np.float64)
        off += n
    if off != len(body):
        raise FormatError("trailing bytes after checkpoint data")
    return out


def load_checkpoint(path, named: dict) -> None:
    arrays = read_checkpoint(path)
    if set(arrays) != set(named):
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        raise FormatError(f"checkpoint does not fit model (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in named.items():
        if arrays[name].shape != p.data.shape:
            raise FormatError(f"{name}: shape {arrays[name].shape} != {p.data.shape}")
        p.data = arrays[name].copy()


# --------------------------------------------------------------------------
# detections and ground truth (pixel [x, y, w, h] boxes)


def _bbox(b, size):
    return [b.xmin * size, b.ymin * size, (b.xmax - b.xmin) * size, (b.ymax - b.ymin) * size]


def _corners(rec, size):
    x, y, w, h = (float(v) / size for v in rec["bbox"])
    return x, y, x + w, y + h


def dumps_detections(dets: list[Detection], image_size: int) -> str:
    recs = [{"image_id": d.image_id, "category_id": d.class_id,
             "bbox": [float(fmt(v)) for v in _bbox(d, image_size)], "score": float(fmt(d.score))}
            for d in dets]
    return json.dumps(recs, indent=1) + "\n"


def loads_detections(text: str, image_size: int) -> list[Detection]:
    try:
        recs = json.loads(text)
        return [Detection(*_corners(r, image_size), int(r["category_id"]), float(r["score"]), int(r["image_id"]))
                for r in recs]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad detections file: {e}") from e


def dumps_gts(gts: list[GroundTruthBox], image_size: int, num_images: int | None = None) -> str:
    doc = {"image_size": image_size,
           "num_images": num_images if num_images is not None else len({g.image_id for g in gts}),
           "annotations": [{"image_id": g.image_id, "category_id": g.class_id,
                            "bbox": [float(fmt(v)) for v in _bbox(g, image_size)], "scale_class": g.scale_class}
                           for g in gts]}
    return json.dumps(doc, indent=1) + "\n"


def loads_gts(text: str) -> tuple[list[GroundTruthBox], int]:
    """Returns the boxes and the image size they were written at."""
    try:
        doc = json.loads(text)
        size = int(doc["image_size"])
        gts = [GroundTruthBox(*_corners(r, size), int(r["category_id"]), r.get("scale_class", ""),
                              int(r["image_id"])) for r in doc["annotations"]]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad ground-truth file: {e}") from e
    return gts, size


# --------------------------------------------------------------------------
# CSV


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) if isinstance(v, (float, int, np.floating, np.integer)) and not isinstance(v, bool)
                    else v for v in r])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    Path(path).write_text(csv_text(header, rows), encoding="utf-8")


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
