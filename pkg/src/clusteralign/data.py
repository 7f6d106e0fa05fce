"""Synthetic two-domain pixel-labeled data with controllable shift.

Each sample is a Voronoi partition of the grid (one site per class, so
class regions are contiguous the way segmentation masks are) with
per-pixel inputs drawn around the class mean and pushed through the
domain's affine transform. A domain pair shares the generative layout but
the target inputs pass through an extra rotation/scale/offset, which is
the gap adaptation has to close.
"""

import hashlib
import json
import os

import numpy as np
from dataclasses import dataclass, field, asdict

from . import tensor_io
from .clustering import IGNORE


@dataclass
class AffineTransform:
    matrix: np.ndarray  # (d, d), invertible
    offset: np.ndarray  # (d,)

    @staticmethod
    def identity(dim):
        return AffineTransform(matrix=np.eye(dim), offset=np.zeros(dim))

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.matrix.T + self.offset

    def compose_after(self, other):
        """Transform equal to: apply `other` first, then self."""
        return AffineTransform(
            matrix=self.matrix @ other.matrix,
            offset=self.matrix @ other.offset + self.offset,
        )


@dataclass
class DomainShift:
    """Covariate shift knobs for the target domain.

    rotation_deg/scale/offset define the affine input shift (rotation acts
    on the first two channels); spread_scale multiplies the per-class noise
    level, modeling a noisier target sensor.
    """

    rotation_deg: float = 0.0
    scale: float = 1.0
    offset: float = 0.0
    spread_scale: float = 1.0

    def transform(self, dim):
        mat = np.eye(dim) * self.scale
        theta = np.deg2rad(self.rotation_deg)
        if dim >= 2:
            rot = np.array(
                [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
            )
            mat[:2, :2] = self.scale * rot
        return AffineTransform(matrix=mat, offset=np.full(dim, float(self.offset)))


@dataclass
class DomainSpec:
    num_classes: int
    grid: tuple  # (h, w)
    input_channels: int
    class_means: np.ndarray  # (K, d), pairwise distinct
    class_spread: np.ndarray  # (K,) noise standard deviations
    transform: AffineTransform = None
    layout_seed: int = 0

    def __post_init__(self):
        self.class_means = np.asarray(self.class_means, dtype=float)
        self.class_spread = np.asarray(self.class_spread, dtype=float)
        if self.transform is None:
            self.transform = AffineTransform.identity(self.input_channels)
        if self.class_means.shape != (self.num_classes, self.input_channels):
            raise ValueError("class_means shape mismatch")
        for a in range(self.num_classes):
            for b in range(a + 1, self.num_classes):
                if np.allclose(self.class_means[a], self.class_means[b]):
                    raise ValueError("duplicate class means")
        if abs(np.linalg.det(self.transform.matrix)) < 1e-9:
            raise ValueError("singular domain transform")

    def spec_hash(self):
        payload = {
            "num_classes": self.num_classes,
            "grid": list(self.grid),
            "input_channels": self.input_channels,
            "class_means": self.class_means.tolist(),
            "class_spread": self.class_spread.tolist(),
            "matrix": self.transform.matrix.tolist(),
            "offset": self.transform.offset.tolist(),
            "layout_seed": self.layout_seed,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class Sample:
    input: np.ndarray  # (h, w, d)
    label: np.ndarray  # (h, w) int


def simplex_means(num_classes, dim, radius=2.0):
    """num_classes equidistant unit-sphere points scaled to `radius`.

    Vertices of a regular simplex (pairwise cosine -1/(K-1)); needs
    dim >= num_classes - 1.
    """
    if dim < num_classes - 1:
        raise ValueError("dimension too small for a regular simplex")
    verts = np.eye(num_classes) - 1.0 / num_classes
    # Orthonormal basis of the centered subspace maps the vertices to R^(K-1).
    basis = np.linalg.svd(verts, full_matrices=False)[2][: num_classes - 1]
    pts = verts @ basis.T
    pts = pts / np.linalg.norm(pts, axis=1, keepdims=True) * radius
    out = np.zeros((num_classes, dim))
    out[:, : num_classes - 1] = pts
    return out


def default_spec(layout_seed=0):
    """The default 5-class toy domain: 16x16 grid, 4 input channels.

    Class means sit on a regular simplex so no class is wedged between two
    others; confusions under shift stay symmetric and recoverable.
    """
    return DomainSpec(
        num_classes=5,
        grid=(16, 16),
        input_channels=4,
        class_means=simplex_means(5, 4, radius=2.0),
        class_spread=np.full(5, 0.35),
        transform=AffineTransform.identity(4),
        layout_seed=layout_seed,
    )


DEFAULT_SHIFT = DomainShift(rotation_deg=30.0, scale=1.0, offset=0.8, spread_scale=1.0)


def _voronoi_labels(rng, grid, num_classes):
    h, w = grid
    sites = np.stack([rng.uniform(0, h, num_classes), rng.uniform(0, w, num_classes)], axis=1)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d2 = (rr[:, :, None] - sites[None, None, :, 0]) ** 2 + (
        cc[:, :, None] - sites[None, None, :, 1]
    ) ** 2
    return np.argmin(d2, axis=2).astype(np.int64)


def generate(spec, n, seed):
    """n samples, deterministic in (spec, n, seed); one RNG stream per sample."""
    if n < 1:
        raise ValueError("need at least one sample")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([spec.layout_seed, seed, i])
        label = _voronoi_labels(rng, spec.grid, spec.num_classes)
        noise = rng.standard_normal(size=label.shape + (spec.input_channels,))
        raw = spec.class_means[label] + noise * spec.class_spread[label][:, :, None]
        samples.append(Sample(input=spec.transform.apply(raw), label=label))
    return samples


def make_target_spec(base, shift):
    dim = base.input_channels
    return DomainSpec(
        num_classes=base.num_classes,
        grid=base.grid,
        input_channels=dim,
        class_means=np.array(base.class_means),
        class_spread=shift.spread_scale * np.array(base.class_spread),
        transform=shift.transform(dim).compose_after(base.transform),
        layout_seed=base.layout_seed + 1,
    )


def make_domain_pair(base, shift, n, seeds=(0, 1)):
    """(source samples, target samples): same generative family, shifted target inputs."""
    target_spec = make_target_spec(base, shift)
    return generate(base, n, seeds[0]), generate(target_spec, n, seeds[1])


def strip_labels(samples):
    """Target-domain view for the trainer: inputs only."""
    return [np.array(s.input) for s in samples]


def save_dataset(path, samples, spec, seed=0):
    os.makedirs(path, exist_ok=True)
    inputs = np.stack([s.input for s in samples])
    labels = np.stack([s.label for s in samples]).astype(float)
    tensor_io.save_tensor(os.path.join(path, "inputs.catn"), inputs)
    tensor_io.save_tensor(os.path.join(path, "labels.catn"), labels)
    manifest = {
        "num_classes": spec.num_classes,
        "grid": list(spec.grid),
        "input_channels": spec.input_channels,
        "num_samples": len(samples),
        "seed": seed,
        "spec_hash": spec.spec_hash(),
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_dataset(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    inputs = tensor_io.load_tensor(os.path.join(path, "inputs.catn"))
    labels = tensor_io.load_tensor(os.path.join(path, "labels.catn"))
    if inputs.shape[0] != manifest["num_samples"]:
        raise ValueError("sample count does not match manifest")
    samples = [
        Sample(input=inputs[i], label=labels[i].astype(np.int64))
        for i in range(inputs.shape[0])
    ]
    return samples, manifest


# CSV sample schema: header `row,col,label,c0,...,c{d-1}`, one line per
# pixel, row-major; label -1 marks IGNORE.
def export_sample_csv(path, sample):
    import csv

    h, w, d = sample.input.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "label"] + [f"c{i}" for i in range(d)])
        for r in range(h):
            for c in range(w):
                writer.writerow(
                    [r, c, int(sample.label[r, c])]
                    + [repr(float(v)) for v in sample.input[r, c]]
                )


def import_sample_csv(path):
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["row", "col", "label"]:
            raise ValueError(f"{path}:1: bad header")
        d = len(header) - 3
        entries = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                r, c, label = int(row[0]), int(row[1]), int(row[2])
                values = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from exc
            if len(values) != d:
                raise ValueError(f"{path}:{line_no}: expected {d} channels")
            entries[(r, c)] = (label, values)
    h = max(k[0] for k in entries) + 1
    w = max(k[1] for k in entries) + 1
    if len(entries) != h * w:
        raise ValueError(f"{path}: missing pixels for a {h}x{w} grid")
    inp = np.zeros((h, w, d))
    lab = np.full((h, w), IGNORE, dtype=np.int64)
    for (r, c), (label, values) in entries.items():
        inp[r, c] = values
        lab[r, c] = label
    return Sample(input=inp, label=lab)
