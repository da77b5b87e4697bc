"""On-disk formats: binary cloud files, pose / calibration / class-table text
files, dataset manifests and ground-truth sidecars.

Cloud files are little-endian binary (magic "SSMC"): per point x,y,z and
h,s,v as 32-bit floats, class id u16, validity flags u8 (bit 0 color, bit 1
class). Poses live in a plain-text sidecar, one line per frame.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ClassEntry, ClassTable, PointCloudFrame, Pose
from .enrichment import PinholeCamera
from .synth import SceneSpec, render_scene

CLOUD_MAGIC = b"SSMC"
CLOUD_VERSION = 1
_POINT = struct.Struct("<ffffffHB")


class DataFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# cloud files
# ---------------------------------------------------------------------------

def write_cloud(frame: PointCloudFrame, path) -> None:
    n = len(frame)
    flags = frame.color_valid.astype(np.uint8) | (
        frame.class_valid.astype(np.uint8) << 1)
    rec = np.zeros(n, dtype=np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                      ("h", "<f4"), ("s", "<f4"), ("v", "<f4"),
                                      ("c", "<u2"), ("f", "u1")]))
    rec["x"], rec["y"], rec["z"] = frame.xyz.T.astype(np.float32)
    rec["h"], rec["s"], rec["v"] = frame.hsv.T.astype(np.float32)
    rec["c"] = frame.cls
    rec["f"] = flags
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC + struct.pack("<HI", CLOUD_VERSION, n))
        f.write(rec.tobytes())


def read_cloud(path, timestamp: float = 0.0,
               pose: Optional[Pose] = None) -> PointCloudFrame:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CLOUD_MAGIC:
        raise DataFormatError(f"{path}: not a cloud file")
    version, n = struct.unpack("<HI", data[4:10])
    if version != CLOUD_VERSION:
        raise DataFormatError(f"{path}: unsupported cloud version {version}")
    if len(data) - 10 < n * _POINT.size:
        raise DataFormatError(f"{path}: truncated cloud file")
    rec = np.frombuffer(data[10:], dtype=np.dtype(
        [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("h", "<f4"), ("s", "<f4"),
         ("v", "<f4"), ("c", "<u2"), ("f", "u1")]), count=n)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    hsv = np.stack([rec["h"], rec["s"], rec["v"]], axis=1).astype(np.float64)
    return PointCloudFrame(timestamp, pose or Pose.identity(), xyz, hsv,
                           rec["c"].astype(np.uint16),
                           (rec["f"] & 1).astype(bool),
                           ((rec["f"] >> 1) & 1).astype(bool))


# ---------------------------------------------------------------------------
# pose files: "timestamp tx ty tz qw qx qy qz" per line
# ---------------------------------------------------------------------------

def write_poses(poses: Sequence[tuple[float, Pose]], path) -> None:
    with open(path, "w") as f:
        for t, p in poses:
            tx, ty, tz = p.translation
            qw, qx, qy, qz = p.rotation
            f.write(f"{t:.9f} {tx:.9f} {ty:.9f} {tz:.9f} "
                    f"{qw:.12f} {qx:.12f} {qy:.12f} {qz:.12f}\n")


def read_poses(path) -> list[tuple[float, Pose]]:
    poses = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DataFormatError(f"{path}:{line_no}: expected 8 fields")
            vals = [float(x) for x in parts]
            poses.append((vals[0], Pose(np.array(vals[1:4]), np.array(vals[4:8]))))
    last = None
    for t, _ in poses:
        if last is not None and t <= last:
            raise DataFormatError(f"{path}: timestamps not strictly increasing")
        last = t
    return poses


# ---------------------------------------------------------------------------
# class table: "id name dynamic ground" per line
# ---------------------------------------------------------------------------

def write_class_table(table: ClassTable, path) -> None:
    with open(path, "w") as f:
        f.write("# id name dynamic ground\n")
        for e in sorted(table.entries, key=lambda e: e.id):
            f.write(f"{e.id} {e.name} {int(e.is_dynamic)} {int(e.is_ground)}\n")


def read_class_table(path) -> ClassTable:
    entries = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{line_no}: expected 4 fields")
            entries.append(ClassEntry(int(parts[0]), parts[1],
                                      bool(int(parts[2])), bool(int(parts[3]))))
    return ClassTable(tuple(entries))


# ---------------------------------------------------------------------------
# calibration: one camera per block, priority implied by file order
# ---------------------------------------------------------------------------

def write_calibration(cameras: Sequence[PinholeCamera], path) -> None:
    with open(path, "w") as f:
        for cam in cameras:
            f.write(f"camera {cam.name or 'cam'}\n")
            f.write(f"{cam.fx} {cam.fy} {cam.cx} {cam.cy} {cam.width} {cam.height}\n")
            tx, ty, tz = cam.extrinsic.translation
            qw, qx, qy, qz = cam.extrinsic.rotation
            f.write(f"extrinsic {tx} {ty} {tz} {qw} {qx} {qy} {qz}\n")


def read_calibration(path) -> list[PinholeCamera]:
    cameras = []
    name = None
    intr = None
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if parts[0] != "camera" or len(parts) != 2:
            raise DataFormatError(f"{path}: expected 'camera <name>' block start")
        name = parts[1]
        intr = lines[i + 1].split()
        extr = lines[i + 2].split()
        if len(intr) != 6 or extr[0] != "extrinsic" or len(extr) != 8:
            raise DataFormatError(f"{path}: malformed camera block {name!r}")
        fx, fy, cx, cy = map(float, intr[:4])
        w, h = int(intr[4]), int(intr[5])
        vals = [float(x) for x in extr[1:]]
        pose = Pose(np.array(vals[:3]), np.array(vals[3:]))
        cameras.append(PinholeCamera(fx, fy, cx, cy, w, h, pose, name=name))
        i += 3
    return cameras


# ---------------------------------------------------------------------------
# dataset manifest and synthetic generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameEntry:
    timestamp: float
    cloud: str
    pose: Pose
    sidecar: Optional[str] = None  # ground-truth object ids, eval/training only


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    frames: tuple[FrameEntry, ...]
    class_table_file: Optional[str] = None
    calibration_file: Optional[str] = None

    def class_table(self) -> ClassTable:
        if self.class_table_file is None:
            return ClassTable()
        return read_class_table(self.root / self.class_table_file)

    def load_frame(self, i: int) -> PointCloudFrame:
        e = self.frames[i]
        return read_cloud(self.root / e.cloud, timestamp=e.timestamp, pose=e.pose)

    def load_object_ids(self, i: int) -> Optional[np.ndarray]:
        e = self.frames[i]
        if e.sidecar is None:
            return None
        return np.load(self.root / e.sidecar)


def save_manifest(manifest: DatasetManifest, path: Optional[Path] = None) -> Path:
    path = path or (manifest.root / "manifest.json")
    frames = []
    for e in manifest.frames:
        frames.append({
            "timestamp": e.timestamp,
            "cloud": e.cloud,
            "pose": list(map(float, e.pose.translation)) + list(map(float, e.pose.rotation)),
            "sidecar": e.sidecar,
        })
    payload = {
        "version": 1,
        "frames": frames,
        "class_table": manifest.class_table_file,
        "calibration": manifest.calibration_file,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DataFormatError(f"no manifest.json under {root}")
    with open(path) as f:
        payload = json.load(f)
    frames = []
    last_t = None
    for fr in payload["frames"]:
        t = float(fr["timestamp"])
        if last_t is not None and t <= last_t:
            raise DataFormatError("manifest timestamps not strictly increasing")
        last_t = t
        vals = fr["pose"]
        pose = Pose(np.array(vals[:3]), np.array(vals[3:]))
        if not (root / fr["cloud"]).exists():
            raise DataFormatError(f"missing cloud file {fr['cloud']}")
        frames.append(FrameEntry(t, fr["cloud"], pose, fr.get("sidecar")))
    return DatasetManifest(root, tuple(frames),
                           class_table_file=payload.get("class_table"),
                           calibration_file=payload.get("calibration"))


def generate_dataset(spec: SceneSpec, out, class_table: Optional[ClassTable] = None
                     ) -> DatasetManifest:
    """Render a scene spec to a dataset directory (clouds, poses, sidecars,
    class table, manifest). Deterministic for a fixed spec seed."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rendered = render_scene(spec)
    entries = []
    for i, sf in enumerate(rendered):
        cloud_name = f"frame_{i:05d}.ssmc"
        sidecar_name = f"frame_{i:05d}.ids.npy"
        write_cloud(sf.frame, out / cloud_name)
        np.save(out / sidecar_name, sf.object_ids.astype(np.int32))
        entries.append(FrameEntry(sf.frame.timestamp, cloud_name,
                                  sf.frame.pose, sidecar_name))
    table_name = None
    if class_table is not None:
        table_name = "classes.txt"
        write_class_table(class_table, out / table_name)
    write_poses([(e.timestamp, e.pose) for e in entries], out / "poses.txt")
    manifest = DatasetManifest(out, tuple(entries), class_table_file=table_name)
    save_manifest(manifest)
    return manifest
