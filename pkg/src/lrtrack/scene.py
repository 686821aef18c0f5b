"""Synthetic LiDAR sequences, search-region cropping and augmentation.

Coordinates: world z is up and the ground is z = 0.  A box's yaw is the
heading of its length axis, so in the box frame x runs along ``l``, y along
``w`` and z along ``h``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

NOISE_SIGMA = 0.02
EDGE_BAND = 0.05
RESAMPLE_EVERY = 5

# extended ranges of the cropped region, per class: (x, y, z) half-widths
EXTENDED_RANGE = {
    "car": (4.8, 4.8, 1.5),
    "pedestrian": (1.92, 1.92, 1.5),
}
V_MAX = {"car": 1.5, "pedestrian": 0.3}
# max curvature of the path in rad per metre travelled
CURVATURE_MAX = {"car": 0.04, "pedestrian": 0.3}
SIZE_RANGES = {  # (w, h, l) uniform bounds
    "car": ((1.6, 2.0), (1.4, 1.7), (3.8, 5.0)),
    "pedestrian": ((0.5, 0.8), (1.5, 1.9), (0.5, 0.9)),
}
OBJECT_POINTS = {"car": 600, "pedestrian": 200}


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    t = math.fmod(theta + math.pi, 2 * math.pi)
    if t <= 0:
        t += 2 * math.pi
    return t - math.pi


def _rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    theta: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and self.l > 0):
            raise ValueError(f"box sizes must be positive, got w={self.w} h={self.h} l={self.l}")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z, self.theta)):
            raise ValueError("box pose must be finite")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.h, self.l, self.theta])

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(*[float(v) for v in a])

    def corners_bev(self) -> np.ndarray:
        """(4, 2) footprint corners, counter-clockwise."""
        hl, hw = self.l / 2, self.w / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return local @ _rot2(self.theta).T + np.array([self.x, self.y])

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        """World points -> this box's frame."""
        p = np.asarray(pts, dtype=float) - self.center
        out = p.copy()
        out[:, :2] = p[:, :2] @ _rot2(self.theta)
        return out

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=float)
        out = p.copy()
        out[:, :2] = p[:, :2] @ _rot2(self.theta).T
        return out + self.center

    def relative_to(self, ref: "Box3D") -> "Box3D":
        """This box expressed in the frame of ``ref``."""
        c = ref.to_local(self.center[None, :])[0]
        return Box3D(c[0], c[1], c[2], self.w, self.h, self.l, self.theta - ref.theta)

    def contains(self, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
        loc = self.to_local(pts)
        return (
            (np.abs(loc[:, 0]) <= self.l / 2 + margin)
            & (np.abs(loc[:, 1]) <= self.w / 2 + margin)
            & (np.abs(loc[:, 2]) <= self.h / 2 + margin)
        )


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    intensity: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if self.intensity.shape[0] != self.points.shape[0]:
                raise ValueError("intensity length differs from point count")

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, mask) -> "PointCloud":
        inten = None if self.intensity is None else self.intensity[mask]
        return PointCloud(self.points[mask], inten)


@dataclass
class Sequence:
    frames: list[PointCloud]
    boxes: list[Box3D]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) != len(self.boxes):
            raise ValueError("frames and gt_boxes differ in length")
        if len(self.frames) < 2:
            raise ValueError("a sequence needs at least two frames")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def cls(self) -> str:
        return self.meta.get("class", "car")


# ---------------------------------------------------------------------------
# generation


def _sample_faces(rng, n, w, h, l, surface_bias):
    """Points on the five visible faces (no floor) of a box centred at the origin.

    Each point picks a face by area; with probability ``surface_bias`` it lands
    in the face interior, otherwise in the band within EDGE_BAND of the face
    extent from the face border.
    """
    # face: (normal axis, sign, in-plane axes, extents)
    faces = [
        (2, +1, (0, 1), (l, w)),  # roof
        (0, +1, (1, 2), (w, h)),
        (0, -1, (1, 2), (w, h)),
        (1, +1, (0, 2), (l, h)),
        (1, -1, (0, 2), (l, h)),
    ]
    half = np.array([l, w, h]) / 2
    areas = np.array([e[0] * e[1] for *_, e in faces])
    choice = rng.choice(len(faces), size=n, p=areas / areas.sum())
    interior = rng.random(n) < surface_bias
    pts = np.empty((n, 3))
    for i in range(n):
        axis, sign, (a, b), (ea, eb) = faces[choice[i]]
        if interior[i]:
            u = rng.uniform(-0.5 + EDGE_BAND, 0.5 - EDGE_BAND)
            v = rng.uniform(-0.5 + EDGE_BAND, 0.5 - EDGE_BAND)
        else:
            while True:
                u, v = rng.uniform(-0.5, 0.5, size=2)
                if abs(u) > 0.5 - EDGE_BAND or abs(v) > 0.5 - EDGE_BAND:
                    break
        p = np.zeros(3)
        p[axis] = sign * half[axis]
        p[a] = u * ea
        p[b] = v * eb
        pts[i] = p
    return pts


def generate_sequence(
    seed: int,
    n_frames: int = 20,
    cls: str = "car",
    clutter_density: float = 0.5,
    surface_bias: float = 0.5,
    v_max: float | None = None,
    noise: float = NOISE_SIGMA,
    n_object_points: int | None = None,
    visibility: tuple[float, float] = (0.6, 1.0),
) -> Sequence:
    """A rigid box moving along a smooth random path amid uniform clutter.

    Speed and path curvature are redrawn every RESAMPLE_EVERY frames; the
    heading follows the path, so a stationary object (``v_max = 0``) never
    turns.  ``clutter_density`` is background points per square metre of the
    scene footprint.  Each frame keeps a random ``visibility`` fraction of the
    object's surface samples.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if cls not in EXTENDED_RANGE:
        raise ValueError(f"unknown object class {cls!r}")
    if not 0.0 <= surface_bias <= 1.0:
        raise ValueError("surface_bias must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    vmax = V_MAX[cls] if v_max is None else float(v_max)
    (w0, w1), (h0, h1), (l0, l1) = SIZE_RANGES[cls]
    w, h, l = rng.uniform(w0, w1), rng.uniform(h0, h1), rng.uniform(l0, l1)
    n_obj = OBJECT_POINTS[cls] if n_object_points is None else n_object_points
    body = _sample_faces(rng, n_obj, w, h, l, surface_bias)

    x, y = rng.uniform(-5, 5, size=2)
    theta = rng.uniform(-math.pi, math.pi)
    boxes = []
    speed = curv = 0.0
    for t in range(n_frames):
        if t % RESAMPLE_EVERY == 0:
            speed = rng.uniform(0.0, vmax) if vmax > 0 else 0.0
            curv = rng.uniform(-CURVATURE_MAX[cls], CURVATURE_MAX[cls])
        if t > 0:
            theta = theta + speed * curv
            x += speed * math.cos(theta)
            y += speed * math.sin(theta)
        boxes.append(Box3D(x, y, h / 2, w, h, l, theta))

    centers = np.array([[b.x, b.y] for b in boxes])
    lo = centers.min(axis=0) - 10.0
    hi = centers.max(axis=0) + 10.0
    n_clutter = int(round(clutter_density * float(np.prod(hi - lo))))
    clutter = np.column_stack(
        [rng.uniform(lo[0], hi[0], n_clutter), rng.uniform(lo[1], hi[1], n_clutter), rng.uniform(0.0, 2.5, n_clutter)]
    )
    clutter_int = rng.uniform(0.0, 1.0, n_clutter)
    body_int = rng.uniform(0.3, 0.9, n_obj)

    frames, sparse = [], []
    for t, box in enumerate(boxes):
        keep = rng.random(n_obj) < rng.uniform(*visibility)
        obj = box.to_world(body[keep])
        if not keep.any():
            sparse.append(t)
        pts = np.vstack([obj, clutter])
        if noise > 0:
            pts = pts + rng.normal(0.0, noise, size=pts.shape)
        frames.append(PointCloud(pts, np.concatenate([body_int[keep], clutter_int])))

    meta = {
        "seed": int(seed),
        "class": cls,
        "clutter_density": float(clutter_density),
        "surface_bias": float(surface_bias),
        "v_max": vmax,
        "sparse_frames": sparse,
    }
    return Sequence(frames, boxes, meta)


# ---------------------------------------------------------------------------
# cropping and augmentation


def crop_search_region(frame: PointCloud, prev_box: Box3D, cls: str = "car") -> PointCloud:
    """Points within twice the box extents around ``prev_box``, in its frame.

    The result is further clipped to the class's extended range.
    """
    if len(frame) == 0:
        return PointCloud(np.zeros((0, 3)), None if frame.intensity is None else np.zeros(0))
    loc = prev_box.to_local(frame.points)
    rx, ry, rz = EXTENDED_RANGE[cls]
    keep = (
        (np.abs(loc[:, 0]) <= prev_box.l)
        & (np.abs(loc[:, 1]) <= prev_box.w)
        & (np.abs(loc[:, 2]) <= prev_box.h)
        & (np.abs(loc[:, 0]) <= rx)
        & (np.abs(loc[:, 1]) <= ry)
        & (np.abs(loc[:, 2]) <= rz)
    )
    inten = None if frame.intensity is None else frame.intensity[keep]
    return PointCloud(loc[keep], inten)


OBJECT_MARGIN = 0.1


def augment_frame(points: np.ndarray, box: Box3D, rng, *, flip: bool | None = None, delta: float | None = None):
    """Random horizontal flip and a small yaw perturbation of the target.

    With probability 0.5 everything is mirrored across the x-z plane; then the
    points inside ``box`` (plus OBJECT_MARGIN) and the box yaw are rotated by
    ``delta ~ U(-5 deg, 5 deg)`` about the box centre.  Background points keep
    their position.  ``flip``/``delta`` override the random draws.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    do_flip = bool(rng.random() < 0.5) if flip is None else flip
    d = float(rng.uniform(-math.radians(5), math.radians(5))) if delta is None else float(delta)
    pts = np.array(points, dtype=np.float64, copy=True).reshape(-1, 3)
    if do_flip:
        pts[:, 1] = -pts[:, 1]
        box = Box3D(box.x, -box.y, box.z, box.w, box.h, box.l, -box.theta)
    if d != 0.0:
        inside = box.contains(pts, OBJECT_MARGIN)
        c = np.array([box.x, box.y])
        pts[inside, :2] = (pts[inside, :2] - c) @ _rot2(d).T + c
        box = replace(box, theta=box.theta + d)
    return pts, box


# ---------------------------------------------------------------------------
# files


def write_bin(path, cloud: PointCloud) -> None:
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    rec = np.column_stack([cloud.points, inten]).astype("<f4")
    Path(path).write_bytes(rec.tobytes())


def read_bin(path) -> PointCloud:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if raw.size % 4:
        raise ValueError(f"{path}: size is not a multiple of 16 bytes")
    rec = raw.reshape(-1, 4).astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3])


def _fmt(v: float) -> str:
    return repr(float(v))


def write_boxes_csv(path, boxes, start_index: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        for i, b in enumerate(boxes):
            wr.writerow([start_index + i] + [_fmt(v) for v in b.as_array()])


def read_boxes_csv(path) -> list[tuple[int, Box3D]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "frame_idx":
                continue
            if len(row) != 8:
                raise ValueError(f"{path}: expected 8 fields, got {len(row)}")
            out.append((int(row[0]), Box3D.from_array([float(v) for v in row[1:]])))
    return out


def save_sequence(directory, seq: Sequence) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        write_bin(d / f"{i:06d}.bin", frame)
    write_boxes_csv(d / "gt.csv", seq.boxes)
    lines = [f"{k} = {v}" for k, v in sorted(seq.meta.items()) if k != "sparse_frames"]
    lines.append("sparse_frames = " + ",".join(str(i) for i in seq.meta.get("sparse_frames", [])))
    (d / "meta.txt").write_text("\n".join(lines) + "\n")


def load_sequence(directory) -> Sequence:
    d = Path(directory)
    gt = read_boxes_csv(d / "gt.csv")
    frames = []
    for idx, _ in gt:
        f = d / f"{idx:06d}.bin"
        if not f.exists():
            raise FileNotFoundError(f)
        frames.append(read_bin(f))
    meta: dict = {}
    mpath = d / "meta.txt"
    if mpath.exists():
        for line in mpath.read_text().splitlines():
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                meta[k] = v
    meta.setdefault("class", "car")
    return Sequence(frames, [b for _, b in gt], meta)
