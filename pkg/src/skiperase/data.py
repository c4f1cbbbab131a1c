"""Synthetic concept world: dataset generation, base-model training and the
evaluation classifier. Two "style-like" concepts carry high-frequency texture
signatures; two "object-like" concepts are defined by shape."""

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericalError
from .schedule import NoiseSchedule, forward_diffuse
from .unet import NULL_CONCEPT, BaseUNet, UNetConfig, build_unet

FAMILIES = ("stripes", "checker", "disk", "box")


@dataclass(frozen=True)
class SyntheticConceptSpec:
    concept_id: str
    family: str  # one of FAMILIES
    fg: tuple    # foreground RGB in [0, 1]
    bg: tuple    # background RGB in [0, 1]
    freq: float = 8.0      # texture cycles per image (texture families)
    kind: str = "style"    # "style" (texture) or "object" (shape)
    count: int = 2000

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")


def default_world(count: int = 2000) -> list:
    """4 concepts: 2 texture ("style") + 2 shape ("object"), with distinct
    palettes so the eval classifier separates them cleanly."""
    return [
        SyntheticConceptSpec("stripes", "stripes", fg=(0.95, 0.55, 0.1), bg=(0.05, 0.1, 0.25),
                             freq=5.0, kind="style", count=count),
        SyntheticConceptSpec("checker", "checker", fg=(0.2, 0.85, 0.3), bg=(0.5, 0.1, 0.6),
                             freq=4.0, kind="style", count=count),
        SyntheticConceptSpec("disk", "disk", fg=(0.9, 0.15, 0.15), bg=(0.75, 0.75, 0.7),
                             kind="object", count=count),
        SyntheticConceptSpec("box", "box", fg=(0.15, 0.35, 0.9), bg=(0.9, 0.85, 0.3),
                             kind="object", count=count),
    ]


def _paint(mask, fg, bg, rng, size):
    img = np.empty((3, size, size), dtype=np.float32)
    jitter = rng.uniform(-0.06, 0.06, size=3)
    for c in range(3):
        img[c] = np.where(mask, fg[c] + jitter[c], bg[c] + jitter[c])
    img += rng.normal(0.0, 0.02, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0) * 2.0 - 1.0  # to [-1, 1]


def render_sample(spec: SyntheticConceptSpec, rng: np.random.Generator, size: int = 32):
    yy, xx = np.mgrid[0:size, 0:size] / size
    if spec.family == "stripes":
        angle = np.deg2rad(45.0 + rng.uniform(-15, 15))
        phase = rng.uniform(0, 2 * np.pi)
        f = spec.freq * rng.uniform(0.9, 1.1)
        wave = np.sin(2 * np.pi * f * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
        mask = wave > 0
    elif spec.family == "checker":
        cell = max(1, int(round(size / (2 * spec.freq))))
        ox, oy = rng.integers(0, cell, 2)
        mask = (((np.arange(size)[:, None] + oy) // cell
                 + (np.arange(size)[None, :] + ox) // cell) % 2) == 0
    elif spec.family == "disk":
        r = size * rng.uniform(0.26, 0.36)
        cx, cy = size / 2 + rng.uniform(-0.08, 0.08, 2) * size
        mask = (xx * size - cx) ** 2 + (yy * size - cy) ** 2 <= r ** 2
    else:  # box
        half = size * rng.uniform(0.22, 0.30)
        cx, cy = size / 2 + rng.uniform(-0.08, 0.08, 2) * size
        mask = (np.abs(xx * size - cx) <= half) & (np.abs(yy * size - cy) <= half)
    return _paint(mask, spec.fg, spec.bg, rng, size)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64, index into concept_ids
    concept_ids: list
    manifest: dict

    def split(self, holdout_frac: float = 0.1):
        n = len(self.labels)
        n_hold = int(round(n * holdout_frac))
        # Samples are interleaved across concepts, so a tail slice is stratified.
        return (Dataset(self.images[:-n_hold], self.labels[:-n_hold], self.concept_ids, self.manifest),
                Dataset(self.images[-n_hold:], self.labels[-n_hold:], self.concept_ids, self.manifest))

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        np.savez(os.path.join(out_dir, "data.npz"), images=self.images, labels=self.labels)
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump({"concept_ids": self.concept_ids, **self.manifest}, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, out_dir) -> "Dataset":
        with np.load(os.path.join(out_dir, "data.npz")) as z:
            images, labels = z["images"], z["labels"]
        with open(os.path.join(out_dir, "manifest.json")) as f:
            manifest = json.load(f)
        return cls(images, labels, manifest.pop("concept_ids"), manifest)


def generate_dataset(specs: list, seed: int = 0, size: int = 32) -> Dataset:
    """Deterministic in (specs, seed); samples interleaved across concepts."""
    per_concept = []
    for ci, spec in enumerate(specs):
        imgs = []
        for k in range(spec.count):
            rng = np.random.default_rng([seed, ci, k])  # per-sample derived seed
            imgs.append(render_sample(spec, rng, size))
        per_concept.append(imgs)
    images, labels = [], []
    maxn = max((s.count for s in specs), default=0)
    for k in range(maxn):
        for ci, spec in enumerate(specs):
            if k < spec.count:
                images.append(per_concept[ci][k])
                labels.append(ci)
    images = (np.stack(images) if images
              else np.zeros((0, 3, size, size), dtype=np.float32))
    manifest = {"seed": seed, "size": size, "specs": [asdict(s) for s in specs]}
    return Dataset(images, np.asarray(labels, dtype=np.int64),
                   [s.concept_id for s in specs], manifest)


@dataclass
class BaseTrainConfig:
    steps: int = 3000
    batch: int = 64
    learning_rate: float = 2e-3
    cond_dropout: float = 0.15  # fraction trained against the empty concept
    seed: int = 0


def train_base(dataset: Dataset, arch: UNetConfig, sched: NoiseSchedule,
               cfg: BaseTrainConfig):
    """Standard class-conditional denoising training. Condition dropout gives
    the empty concept an unconditional meaning, which the erasure losses rely
    on. Returns (model, loss trace)."""
    if tuple(arch.concepts) != tuple(dataset.concept_ids):
        raise ConfigError("arch concepts must match dataset concept order")
    model = build_unet(arch, seed=cfg.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator("cpu").manual_seed(cfg.seed)
    images = torch.from_numpy(dataset.images)
    labels = dataset.labels
    trace = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(labels), cfg.batch)
        x0 = images[idx]
        t = torch.from_numpy(rng.integers(0, sched.T, cfg.batch))
        noise = torch.randn(x0.shape, generator=gen)
        z_t = forward_diffuse(x0, t, noise, sched)
        cond_idx = torch.from_numpy(labels[idx] + 1)  # row 0 is the null concept
        drop = torch.from_numpy(rng.random(cfg.batch) < cfg.cond_dropout)
        cond_idx = torch.where(drop, torch.zeros_like(cond_idx), cond_idx)
        eps_hat = model(z_t, t, model.cond_table(cond_idx))
        loss = F.mse_loss(eps_hat, noise)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite base-training loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append({"step": step, "loss": loss.detach().item()})
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, trace


class ClassifierNet(nn.Module):
    def __init__(self, n_classes, embed_dim=64):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.fc1 = nn.Linear(32 * 16, embed_dim)
        self.fc2 = nn.Linear(embed_dim, n_classes)

    def embed(self, x):
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        h = self.pool(h).flatten(1)
        return F.relu(self.fc1(h))

    def forward(self, x):
        return self.fc2(self.embed(x))


@dataclass
class ConceptClassifier:
    net: ClassifierNet
    concept_ids: list
    holdout_accuracy: float
    fp_floor: float           # max off-target rate observed on held-out data
    confusion: np.ndarray     # rows true, cols predicted, normalized per row
    prototypes: np.ndarray    # (n_concepts, embed_dim) mean penultimate features
    manifest: dict = field(default_factory=dict)

    @torch.no_grad()
    def predict(self, images) -> np.ndarray:
        x = torch.as_tensor(images, dtype=torch.float32)
        return self.net(x).argmax(dim=1).numpy()

    @torch.no_grad()
    def embed(self, images) -> np.ndarray:
        x = torch.as_tensor(images, dtype=torch.float32)
        return self.net.embed(x).numpy()

    def concept_index(self, concept_id: str) -> int:
        try:
            return self.concept_ids.index(concept_id)
        except ValueError:
            raise InputError(f"classifier does not know concept {concept_id!r}")


def train_classifier(dataset: Dataset, seed: int = 0, epochs: int = 3,
                     batch: int = 128, lr: float = 2e-3) -> ConceptClassifier:
    """Deterministic small CNN; records held-out accuracy, the false-positive
    floor, the confusion matrix and per-concept feature prototypes."""
    train, hold = dataset.split()
    torch.manual_seed(seed)
    net = ClassifierNet(len(dataset.concept_ids))
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    imgs = torch.from_numpy(train.images)
    labels = torch.from_numpy(train.labels)
    n = len(labels)
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch):
            idx = order[i:i + batch]
            loss = F.cross_entropy(net(imgs[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        pred = net(torch.from_numpy(hold.images)).argmax(dim=1).numpy()
    acc = float((pred == hold.labels).mean())
    k = len(dataset.concept_ids)
    confusion = np.zeros((k, k))
    for ti in range(k):
        sel = hold.labels == ti
        if sel.any():
            for pi in range(k):
                confusion[ti, pi] = float((pred[sel] == pi).mean())
    fp_floor = float(max((confusion[ti, pi] for ti in range(k) for pi in range(k) if ti != pi),
                         default=0.0))
    with torch.no_grad():
        protos = np.stack([
            net.embed(torch.from_numpy(train.images[train.labels == ci])).mean(axis=0)
            for ci in range(k)
        ])
    return ConceptClassifier(net, list(dataset.concept_ids), acc, fp_floor, confusion,
                             protos, manifest={"seed": seed, "epochs": epochs})
