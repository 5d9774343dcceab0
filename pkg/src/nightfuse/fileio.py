"""File formats, dataset manifests, and configuration parsing.

Binary formats (all little-endian):
  signed map  "CMDA" | u16 version | u32 width | u32 height | float32 row-major
  voxel grid  "CMDV" | u16 version | u16 bins | u32 width | u32 height | float64
  depth map   "CMDZ" | u16 version | u32 width | u32 height | float64 (NaN = invalid)
  checkpoint  "CMDP" | u16 version | u16 patch | u32 feat | u32 attn | u32 classes | i64 seed | u64 n | float64

Grayscale images are 8-bit PGM (P5) or PNG, divided by 255 on ingest; label
masks use the same 8-bit containers with raw class ids (255 = IGNORE).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .content import ContentParams, extract_content
from .core import (
    EventStream,
    GrayImage,
    LabelMask,
    ParseError,
    SignedMap,
)
from .metrics import ConfusionMatrix, format_percent, iou_per_class, miou
from .model import ModelDims, ModelParams
from .motion import FilterParams, extract_motion, night_style_hook, salt_pepper_hook
from .trainer import (
    SourceSample,
    TargetSample,
    TrainConfig,
    TrainingLog,
)
from .voxel import WindowSpec, collapse_to_map, select_window, voxelize

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# PGM / PNG rasters
# ---------------------------------------------------------------------------

def _read_pgm_u8(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (P5) file")
    # Header tokens: width, height, maxval; '#' starts a comment to end of line.
    tokens: List[int] = []
    i = 2
    while len(tokens) < 3:
        if i >= len(raw):
            raise ParseError(f"{path}: truncated PGM header")
        ch = raw[i:i + 1]
        if ch == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace():
                j += 1
            try:
                tokens.append(int(raw[i:j]))
            except ValueError:
                raise ParseError(f"{path}: bad PGM header token {raw[i:j]!r}")
            i = j
    i += 1  # single whitespace byte after maxval
    width, height, maxval = tokens
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 PGM supported, got {maxval}")
    pixels = np.frombuffer(raw[i:], dtype=np.uint8)
    if pixels.size != width * height:
        raise ParseError(f"{path}: expected {width * height} pixels, got {pixels.size}")
    return pixels.reshape(height, width).copy()


def _write_pgm_u8(arr: np.ndarray, path) -> None:
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.astype(np.uint8).tobytes())


def _read_raster_u8(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return _read_pgm_u8(path)
    if suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    raise ParseError(f"{path}: unsupported raster format {suffix!r} (use .pgm or .png)")


def _write_raster_u8(arr: np.ndarray, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        _write_pgm_u8(arr, path)
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(arr.astype(np.uint8), mode="L").save(path)
    else:
        raise ParseError(f"{path}: unsupported raster format {suffix!r} (use .pgm or .png)")


def read_gray_image(path) -> GrayImage:
    arr = _read_raster_u8(path)
    return GrayImage(arr.shape[1], arr.shape[0], arr.astype(np.float64) / 255.0)


def write_gray_image(img: GrayImage, path) -> None:
    _write_raster_u8(np.rint(img.data * 255.0).astype(np.uint8), path)


def read_label_mask(path, num_classes: int) -> LabelMask:
    arr = _read_raster_u8(path)
    return LabelMask(arr.shape[1], arr.shape[0], arr.astype(np.int32), num_classes)


def write_label_mask(mask: LabelMask, path) -> None:
    _write_raster_u8(mask.labels.astype(np.uint8), path)


def signed_map_to_u8(m: SignedMap) -> np.ndarray:
    """8-bit visualization: value v renders as round(127.5 * (v + 1))."""
    return np.rint(127.5 * (m.data + 1.0)).astype(np.uint8)


def write_signed_map_viz(m: SignedMap, path) -> None:
    _write_raster_u8(signed_map_to_u8(m), path)


# ---------------------------------------------------------------------------
# Binary containers
# ---------------------------------------------------------------------------

def _expect(cond: bool, path, message: str) -> None:
    if not cond:
        raise ParseError(f"{path}: {message}")


def write_signed_map(m: SignedMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"CMDA")
        fh.write(struct.pack("<HII", FORMAT_VERSION, m.width, m.height))
        fh.write(m.data.astype("<f4").tobytes())


def read_signed_map(path) -> SignedMap:
    raw = Path(path).read_bytes()
    _expect(raw[:4] == b"CMDA", path, "bad magic for signed map file")
    version, width, height = struct.unpack_from("<HII", raw, 4)
    _expect(version == FORMAT_VERSION, path, f"unsupported version {version}")
    payload = np.frombuffer(raw, dtype="<f4", offset=14)
    _expect(payload.size == width * height, path, "payload length does not match header")
    return SignedMap(width, height, payload.astype(np.float64))


def write_voxel_grid(grid, path) -> None:
    from .voxel import VoxelGrid  # local import keeps module load order simple

    assert isinstance(grid, VoxelGrid)
    with open(path, "wb") as fh:
        fh.write(b"CMDV")
        fh.write(struct.pack("<HHII", FORMAT_VERSION, grid.bins, grid.width, grid.height))
        fh.write(grid.data.astype("<f8").tobytes())


def read_voxel_grid(path):
    from .voxel import VoxelGrid

    raw = Path(path).read_bytes()
    _expect(raw[:4] == b"CMDV", path, "bad magic for voxel grid file")
    version, bins, width, height = struct.unpack_from("<HHII", raw, 4)
    _expect(version == FORMAT_VERSION, path, f"unsupported version {version}")
    payload = np.frombuffer(raw, dtype="<f8", offset=16)
    _expect(payload.size == bins * width * height, path, "payload length does not match header")
    return VoxelGrid(bins, width, height, payload.reshape(bins, height, width))


def write_depth_map(depth, path) -> None:
    from .warp import DepthMap

    assert isinstance(depth, DepthMap)
    with open(path, "wb") as fh:
        fh.write(b"CMDZ")
        fh.write(struct.pack("<HII", FORMAT_VERSION, depth.width, depth.height))
        fh.write(depth.depth.astype("<f8").tobytes())


def read_depth_map(path):
    from .warp import DepthMap

    raw = Path(path).read_bytes()
    _expect(raw[:4] == b"CMDZ", path, "bad magic for depth map file")
    version, width, height = struct.unpack_from("<HII", raw, 4)
    _expect(version == FORMAT_VERSION, path, f"unsupported version {version}")
    payload = np.frombuffer(raw, dtype="<f8", offset=14)
    _expect(payload.size == width * height, path, "payload length does not match header")
    return DepthMap(width, height, payload.reshape(height, width))


def save_params(params: ModelParams, path) -> None:
    d = params.dims
    with open(path, "wb") as fh:
        fh.write(b"CMDP")
        fh.write(struct.pack("<HHIIIqQ", FORMAT_VERSION, d.patch, d.feat, d.attn,
                             d.classes, params.seed, params.vector.size))
        fh.write(params.vector.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    _expect(raw[:4] == b"CMDP", path, "bad magic for checkpoint file")
    version, patch, feat, attn, classes, seed, n = struct.unpack_from("<HHIIIqQ", raw, 4)
    _expect(version == FORMAT_VERSION, path, f"unsupported version {version}")
    dims = ModelDims(patch, feat, attn, classes)
    _expect(n == dims.vector_length(), path, "parameter count does not match dims")
    payload = np.frombuffer(raw, dtype="<f8", offset=4 + struct.calcsize("<HHIIIqQ"))
    _expect(payload.size == n, path, "payload length does not match header")
    return ModelParams(dims, payload.copy(), seed)


# ---------------------------------------------------------------------------
# Event CSV
# ---------------------------------------------------------------------------

def load_events(path, sensor_width: Optional[int] = None, sensor_height: Optional[int] = None) -> EventStream:
    """Read CSV rows `t_us,x,y,p` with p in {0, 1} mapped to {-1, +1}.

    Sensor dimensions default to the coordinate maxima plus one.
    """
    ts, xs, ys, ps = [], [], [], []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 comma-separated fields, got {len(parts)}")
            try:
                t, x, y, p = (int(v) for v in parts)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer field in {line!r}")
            if p not in (0, 1):
                raise ParseError(f"{path}:{lineno}: polarity must be 0 or 1, got {p}")
            ts.append(t)
            xs.append(x)
            ys.append(y)
            ps.append(1 if p == 1 else -1)
    if sensor_width is None:
        sensor_width = (max(xs) + 1) if xs else 0
    if sensor_height is None:
        sensor_height = (max(ys) + 1) if ys else 0
    return EventStream(
        np.array(ts, dtype=np.int64), np.array(xs, dtype=np.int64),
        np.array(ys, dtype=np.int64), np.array(ps, dtype=np.int64),
        sensor_width, sensor_height,
    )


def write_events(stream: EventStream, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
            fh.write(f"{t},{x},{y},{1 if p > 0 else 0}\n")


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

_PATH_KEYS = {"image", "prev", "labels", "events", "emap"}
_MANIFEST_KEYS = _PATH_KEYS | {"anchor"}


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    fields: Dict[str, str]

    def path(self, key: str) -> Path:
        return Path(self.fields[key])


def parse_manifest(path) -> List[ManifestEntry]:
    """Line-delimited `id key=value ...` records; all referenced paths must exist."""
    base = Path(path).parent
    entries: List[ManifestEntry] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            sample_id = parts[0]
            if sample_id in seen:
                raise ParseError(f"{path}:{lineno}: duplicate sample id {sample_id!r}")
            seen.add(sample_id)
            fields: Dict[str, str] = {}
            for token in parts[1:]:
                if "=" not in token:
                    raise ParseError(f"{path}:{lineno}: expected key=value, got {token!r}")
                key, value = token.split("=", 1)
                if key not in _MANIFEST_KEYS:
                    raise ParseError(f"{path}:{lineno}: unknown manifest key {key!r}")
                if key in _PATH_KEYS:
                    resolved = base / value
                    if not resolved.exists():
                        raise ParseError(f"{path}:{lineno}: missing file {resolved}")
                    value = str(resolved)
                fields[key] = value
            entries.append(ManifestEntry(sample_id, fields))
    return entries


def _require(entry: ManifestEntry, key: str, role: str) -> str:
    if key not in entry.fields:
        raise ParseError(f"{role} manifest entry {entry.sample_id!r} is missing {key!r}")
    return entry.fields[key]


def _content_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index) % (2 ** 31)


def load_source_samples(entries: Sequence[ManifestEntry], settings: "RunSettings",
                        num_classes: int) -> List[SourceSample]:
    hook = None
    if settings.style_noise_density > 0.0:
        hook = salt_pepper_hook(settings.style_noise_density, settings.style_noise_seed)
    samples = []
    for index, entry in enumerate(entries):
        image = read_gray_image(_require(entry, "image", "source"))
        prev = read_gray_image(_require(entry, "prev", "source"))
        labels = read_label_mask(_require(entry, "labels", "source"), num_classes)
        e_me = extract_motion(prev, image, settings.filter)
        cp = ContentParams(settings.gamma, settings.filter,
                           _content_seed(settings.train.seed, index))
        samples.append(SourceSample(image, night_style_hook(e_me, hook),
                                    extract_content(image, cp), labels))
    return samples


def _load_event_map(entry: ManifestEntry, image: GrayImage, settings: "RunSettings") -> SignedMap:
    if "emap" in entry.fields:
        return read_signed_map(entry.fields["emap"])
    events_path = _require(entry, "events", "target")
    anchor = int(_require(entry, "anchor", "target"))
    stream = load_events(events_path, image.width, image.height)
    window = select_window(stream, WindowSpec(anchor, settings.window_us))
    return collapse_to_map(voxelize(window, settings.bins, image.width, image.height))


def load_target_samples(entries: Sequence[ManifestEntry], settings: "RunSettings") -> List[TargetSample]:
    samples = []
    for index, entry in enumerate(entries):
        image = read_gray_image(_require(entry, "image", "target"))
        events = _load_event_map(entry, image, settings)
        cp = ContentParams(settings.gamma, settings.filter,
                           _content_seed(settings.train.seed + 1, index))
        samples.append(TargetSample(image, events, extract_content(image, cp)))
    return samples


def load_eval_split(entries: Sequence[ManifestEntry], settings: "RunSettings",
                    num_classes: int) -> Tuple[List[TargetSample], List[LabelMask]]:
    samples = load_target_samples(entries, settings)
    labels = [read_label_mask(_require(e, "labels", "eval"), num_classes) for e in entries]
    return samples, labels


# ---------------------------------------------------------------------------
# Calibration files
# ---------------------------------------------------------------------------

_CALIB_KEYS = {"src_fx", "src_fy", "src_cx", "src_cy",
               "dst_fx", "dst_fy", "dst_cx", "dst_cy", "extrinsic"}


def read_calibration(path):
    """Plain-text calibration: fx/fy/cx/cy per camera plus a 12-number row-major R|t.

    Returns (source intrinsics, target intrinsics, rigid transform).
    """
    from .warp import CameraIntrinsics, RigidTransform

    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _CALIB_KEYS:
                raise ParseError(f"{path}:{lineno}: unknown calibration key {key!r}")
            values[key] = value
    missing = _CALIB_KEYS - values.keys()
    if missing:
        raise ParseError(f"{path}: missing calibration keys {sorted(missing)}")
    try:
        k_src = CameraIntrinsics(*(float(values[f"src_{k}"]) for k in ("fx", "fy", "cx", "cy")))
        k_dst = CameraIntrinsics(*(float(values[f"dst_{k}"]) for k in ("fx", "fy", "cx", "cy")))
        numbers = [float(v) for v in values["extrinsic"].split()]
    except ValueError:
        raise ParseError(f"{path}: non-numeric calibration value")
    if len(numbers) != 12:
        raise ParseError(f"{path}: extrinsic must hold 12 numbers, got {len(numbers)}")
    mat = np.array(numbers, dtype=np.float64).reshape(3, 4)
    return k_src, k_dst, RigidTransform(mat[:, :3], mat[:, 3])


# ---------------------------------------------------------------------------
# Scenario export
# ---------------------------------------------------------------------------

def write_scenario(scenario, out_dir) -> None:
    """Write a synthetic scenario as images, event maps, labels, and manifests."""
    out_dir = Path(out_dir)
    for sub in ("source", "target", "eval"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    src_lines = []
    for i, (sample, prev) in enumerate(zip(scenario.source, scenario.source_prev)):
        stem = f"s{i:05d}"
        write_gray_image(sample.image, out_dir / "source" / f"{stem}_image.pgm")
        write_gray_image(prev, out_dir / "source" / f"{stem}_prev.pgm")
        write_label_mask(sample.labels, out_dir / "source" / f"{stem}_labels.pgm")
        src_lines.append(f"{stem} image=source/{stem}_image.pgm "
                         f"prev=source/{stem}_prev.pgm labels=source/{stem}_labels.pgm")
    (out_dir / "source.manifest").write_text("\n".join(src_lines) + "\n", encoding="utf-8")

    tgt_lines = []
    for i, sample in enumerate(scenario.target):
        stem = f"t{i:05d}"
        write_gray_image(sample.image, out_dir / "target" / f"{stem}_image.pgm")
        write_signed_map(sample.events, out_dir / "target" / f"{stem}_emap.smap")
        tgt_lines.append(f"{stem} image=target/{stem}_image.pgm emap=target/{stem}_emap.smap")
    (out_dir / "target.manifest").write_text("\n".join(tgt_lines) + "\n", encoding="utf-8")

    eval_lines = []
    for i, (sample, labels) in enumerate(zip(scenario.eval_samples, scenario.eval_labels)):
        stem = f"e{i:05d}"
        write_gray_image(sample.image, out_dir / "eval" / f"{stem}_image.pgm")
        write_signed_map(sample.events, out_dir / "eval" / f"{stem}_emap.smap")
        write_label_mask(labels, out_dir / "eval" / f"{stem}_labels.pgm")
        eval_lines.append(f"{stem} image=eval/{stem}_image.pgm "
                          f"emap=eval/{stem}_emap.smap labels=eval/{stem}_labels.pgm")
    (out_dir / "eval.manifest").write_text("\n".join(eval_lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunSettings:
    """Training configuration plus the extraction parameters shared by loaders."""

    train: TrainConfig = field(default_factory=TrainConfig)
    filter: FilterParams = field(default_factory=FilterParams)
    gamma: int = 1
    style_noise_density: float = 0.0
    style_noise_seed: int = 0
    bins: int = 5
    window_us: int = 50_000


_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}

# config key -> (section, attribute, coercion)
_CONFIG_KEYS = {
    "iterations": ("train", "iterations", int),
    "batch_size": ("train", "batch_size", int),
    "lam_image": ("train", "lam_image", float),
    "lam_events": ("train", "lam_events", float),
    "lam_content": ("train", "lam_content", float),
    "lam_fused": ("train", "lam_fused", float),
    "sigma": ("train", "sigma", float),
    "lr": ("train", "lr", float),
    "seed": ("train", "seed", int),
    "conf_threshold": ("train", "conf_threshold", float),
    "self_training": ("train", "self_training", "bool"),
    "target_warmup": ("train", "target_warmup", int),
    "modality": ("train", "modality", str),
    "eval_interval": ("train", "eval_interval", int),
    "patch": ("dims", "patch", int),
    "feat": ("dims", "feat", int),
    "attn": ("dims", "attn", int),
    "classes": ("dims", "classes", int),
    "alpha": ("filter", "alpha", float),
    "beta": ("filter", "beta", float),
    "epsilon": ("filter", "epsilon", float),
    "gamma": ("top", "gamma", int),
    "style_noise_density": ("top", "style_noise_density", float),
    "style_noise_seed": ("top", "style_noise_seed", int),
    "bins": ("top", "bins", int),
    "window_us": ("top", "window_us", int),
}


def read_config(path) -> Dict[str, str]:
    """Flat `key = value` file; '#' starts a comment."""
    out: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_KEYS:
                raise ParseError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = value
    return out


def build_settings(values: Dict[str, str]) -> RunSettings:
    """Build RunSettings from string-valued config keys (file contents or CLI overrides)."""
    sections = {"train": {}, "dims": {}, "filter": {}, "top": {}}
    for key, raw in values.items():
        if key not in _CONFIG_KEYS:
            raise ParseError(f"unknown config key {key!r}")
        section, attr, kind = _CONFIG_KEYS[key]
        if kind == "bool":
            low = str(raw).strip().lower()
            if low not in _BOOL_VALUES:
                raise ParseError(f"config key {key!r}: expected a boolean, got {raw!r}")
            value = _BOOL_VALUES[low]
        else:
            try:
                value = kind(raw)
            except (TypeError, ValueError):
                raise ParseError(f"config key {key!r}: cannot parse {raw!r}")
        sections[section][attr] = value
    dims = ModelDims(**sections["dims"]) if sections["dims"] else ModelDims()
    train = TrainConfig(dims=dims, **sections["train"])
    filt = FilterParams(**sections["filter"]) if sections["filter"] else FilterParams()
    return RunSettings(train=train, filter=filt, **sections["top"])


def write_config(values: Dict[str, object], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in values.items():
            fh.write(f"{key} = {value}\n")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.10g}"


def write_metrics_log(log: TrainingLog, path) -> None:
    """Tab-delimited per-step log; evaluation columns filled on eval steps."""
    evals = {rec.step: rec for rec in log.evals}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\tloss_source\tloss_target\tchoice\tmiou_fused\tmiou_image\n")
        for rec in log.steps:
            ev = evals.get(rec.step)
            fh.write("\t".join([
                str(rec.step),
                _fmt(rec.loss_source),
                _fmt(rec.loss_target),
                rec.choice,
                _fmt(ev.miou_fused if ev else None),
                _fmt(ev.miou_image if ev else None),
            ]) + "\n")


def write_iou_report(class_names: Sequence[str], cm: ConfusionMatrix, out_dir,
                     stem: str = "iou_report") -> Dict[str, object]:
    """Plain-text table plus JSON record; returns the record."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    iou = iou_per_class(cm)
    mean = miou(cm)
    record = {
        "classes": [
            {"name": name, "iou_percent": None if not np.isfinite(v) else round(float(v) * 100.0, 4)}
            for name, v in zip(class_names, iou)
        ],
        "miou_percent": round(mean * 100.0, 4),
        "evaluated_pixels": cm.total(),
    }
    lines = [f"{'class':<16} IoU%"]
    for name, v in zip(class_names, iou):
        shown = "undefined" if not np.isfinite(v) else format_percent(float(v))
        lines.append(f"{name:<16} {shown}")
    lines.append(f"{'MIoU':<16} {format_percent(mean)}")
    (out_dir / f"{stem}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / f"{stem}.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    return record
