"""Feature-pack reader/writer.

Layout of a pack directory::

    manifest.json            version, encoder specs, sample index, checksums
    features/<encoder>.bin   little-endian float32, row-major, samples x 7D
    targets.csv              sample_id,group_id,domain,t0..t{C-1}
    hidden_targets.csv       optional; ground truth of unlabeled samples

Rows of every ``.bin`` follow the order of ``manifest["samples"]``. Each sample
entry lists its byte offset into every encoder file (same order as
``manifest["encoders"]``).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, InputError
from .records import DOMAINS, EncoderSpec, SampleRecord

FORMAT_NAME = "blendfuse-feature-pack"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class FeaturePack:
    samples: list[SampleRecord]
    specs: list[EncoderSpec]
    num_classes: int
    metadata: dict = field(default_factory=dict)

    def spec(self, name: str) -> EncoderSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(name)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_targets(path: Path, samples, num_classes: int, hidden: bool) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "group_id", "domain"] + [f"t{c}" for c in range(num_classes)])
        for s in samples:
            t = s.hidden_target if hidden else s.target
            vals = [""] * num_classes if t is None else [_fmt(v) for v in t]
            w.writerow([s.sample_id, s.group_id, s.domain] + vals)


def write_feature_pack(
    path,
    samples: list[SampleRecord],
    specs: list[EncoderSpec],
    num_classes: int,
    metadata: dict | None = None,
) -> Path:
    path = Path(path)
    if len({s.name for s in specs}) != len(specs):
        raise InputError("encoder names must be unique within a pack")
    if len({s.sample_id for s in samples}) != len(samples):
        raise InputError("sample ids must be unique within a pack")
    for s in samples:
        s.validate(specs)
        for t in (s.target, s.hidden_target):
            if t is not None and len(t) != num_classes:
                raise InputError(f"{s.sample_id}: target has {len(t)} entries, expected {num_classes}")
    (path / "features").mkdir(parents=True, exist_ok=True)

    enc_entries = []
    for spec in specs:
        rel = f"features/{spec.name}.bin"
        block = np.stack([s.features[spec.name] for s in samples]).astype(_F32) if samples else np.zeros((0, spec.width), _F32)
        (path / rel).write_bytes(block.tobytes(order="C"))
        enc_entries.append(
            {
                "name": spec.name,
                "modality": spec.modality,
                "dim": spec.dim,
                "width": spec.width,
                "file": rel,
                "num_samples": len(samples),
                "sha256": sha256_file(path / rel),
            }
        )

    _write_targets(path / "targets.csv", samples, num_classes, hidden=False)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "num_classes": num_classes,
        "dtype": "float32-le",
        "encoders": enc_entries,
        "samples": [
            {
                "sample_id": s.sample_id,
                "group_id": s.group_id,
                "domain": s.domain,
                "offsets": [row * spec.width * _F32.itemsize for spec in specs],
            }
            for row, s in enumerate(samples)
        ],
        "targets_file": "targets.csv",
        "targets_sha256": sha256_file(path / "targets.csv"),
        "metadata": metadata or {},
    }
    if any(s.hidden_target is not None for s in samples):
        _write_targets(path / "hidden_targets.csv", samples, num_classes, hidden=True)
        manifest["hidden_targets_file"] = "hidden_targets.csv"
        manifest["hidden_targets_sha256"] = sha256_file(path / "hidden_targets.csv")
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _read_targets(path: Path, num_classes: int) -> dict[str, tuple[str, str, np.ndarray | None]]:
    out = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    if not rows or rows[0][:3] != ["sample_id", "group_id", "domain"]:
        raise FormatError(f"{path}: bad header")
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3 + num_classes:
            raise FormatError(f"{path}:{lineno}: expected {3 + num_classes} fields, got {len(row)}")
        vals = row[3:]
        if all(v == "" for v in vals):
            t = None
        else:
            try:
                t = np.array([float(v) for v in vals])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
        out[row[0]] = (row[1], row[2], t)
    return out


def _verify_checksum(path: Path, expected: str | None) -> None:
    if expected is not None and sha256_file(path) != expected:
        raise FormatError(f"{path}: checksum mismatch")


def load_feature_pack(path) -> FeaturePack:
    path = Path(path)
    mpath = path / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"{mpath}: manifest not found") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON at offset {exc.pos}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"{mpath}: not a feature pack")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{mpath}: unknown version {manifest.get('version')!r}")

    num_classes = int(manifest["num_classes"])
    entries = manifest["samples"]
    n = len(entries)
    specs, blocks = [], []
    for k, enc in enumerate(manifest["encoders"]):
        try:
            spec = EncoderSpec(enc["name"], enc["modality"], int(enc["dim"]))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{mpath}: bad encoder entry #{k}: {exc}") from exc
        if int(enc.get("width", spec.width)) != spec.width:
            raise FormatError(
                f"{mpath}: encoder {spec.name!r} width {enc['width']} != 7 x dim {spec.dim}"
            )
        fpath = path / enc["file"]
        if not fpath.is_file():
            raise FormatError(f"{fpath}: missing feature file for encoder {spec.name!r}")
        row_bytes = spec.width * _F32.itemsize
        size = fpath.stat().st_size
        expected = n * row_bytes
        if size < expected:
            bad_row = size // row_bytes
            raise FormatError(
                f"{fpath}: truncated at offset {size} (expected {expected} bytes; "
                f"sample #{bad_row} starting at offset {bad_row * row_bytes} is incomplete)"
            )
        if size > expected:
            raise FormatError(
                f"{fpath}: {size - expected} unexpected trailing bytes after offset {expected}"
            )
        _verify_checksum(fpath, enc.get("sha256"))
        block = np.fromfile(fpath, dtype=_F32).reshape(n, spec.width).astype(np.float64)
        if not np.all(np.isfinite(block)):
            row = int(np.argwhere(~np.isfinite(block))[0, 0])
            raise FormatError(f"{fpath}: non-finite value in sample #{row} at offset {row * row_bytes}")
        for i, e in enumerate(entries):
            if e["offsets"][k] != i * row_bytes:
                raise FormatError(f"{mpath}: sample {e['sample_id']!r} offset {e['offsets'][k]} for {spec.name!r} != {i * row_bytes}")
        specs.append(spec)
        blocks.append(block)
    if len({s.name for s in specs}) != len(specs):
        raise FormatError(f"{mpath}: duplicate encoder names")

    tpath = path / manifest.get("targets_file", "targets.csv")
    _verify_checksum(tpath, manifest.get("targets_sha256"))
    targets = _read_targets(tpath, num_classes)
    hidden = {}
    if "hidden_targets_file" in manifest:
        hpath = path / manifest["hidden_targets_file"]
        _verify_checksum(hpath, manifest.get("hidden_targets_sha256"))
        hidden = _read_targets(hpath, num_classes)

    samples = []
    for i, e in enumerate(entries):
        sid = e["sample_id"]
        if sid not in targets:
            raise FormatError(f"{tpath}: no row for sample {sid!r}")
        group, domain, t = targets[sid]
        if (group, domain) != (e["group_id"], e["domain"]) or domain not in DOMAINS:
            raise FormatError(f"{tpath}: sample {sid!r} disagrees with manifest")
        rec = SampleRecord(
            sample_id=sid,
            group_id=group,
            domain=domain,
            features={spec.name: block[i] for spec, block in zip(specs, blocks)},
            target=t,
            hidden_target=hidden.get(sid, (None, None, None))[2],
        )
        try:
            rec.validate()
        except InputError as exc:
            raise FormatError(f"{tpath}: {exc}") from exc
        samples.append(rec)
    return FeaturePack(samples, specs, num_classes, manifest.get("metadata", {}))


def pack_checksum(path) -> str:
    """Digest over the manifest and every payload file of a pack."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(sha256_file(f).encode())
    return h.hexdigest()
