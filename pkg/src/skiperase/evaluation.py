"""Desk-scale metric analogs: a seed-pinned random-feature perceptual
distance (labeled "LPIPS-proxy" everywhere), concept erasure rate from the
eval classifier, a cosine alignment score, and the report runner.

The trade-off score is Avg(e) - Avg(u) over concept-level means; higher means
a better erase/preserve trade-off. FID is deliberately not computed."""

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .adapter import AdapterStack
from .data import ConceptClassifier
from .diffusion import sample
from .errors import ConfigError, InputError, PreconditionError
from .schedule import NoiseSchedule
from .unet import BaseUNet

PERCEPTUAL_SEED = 2024
REPORT_SCHEMA_VERSION = 1


class PerceptualMetric:
    """Fixed random multi-scale convolutional features with unit-normalized
    channel distances; range-normalized to [0, 1] against a calibration set.
    Deterministic across platforms for a pinned seed. Not LPIPS: a proxy."""

    def __init__(self, seed: int = PERCEPTUAL_SEED, channels=(16, 32, 64)):
        gen = torch.Generator("cpu").manual_seed(seed)
        self.seed = seed
        self.weights = []
        c_in = 3
        for c_out in channels:
            w = torch.randn(c_out, c_in, 3, 3, generator=gen) / np.sqrt(9 * c_in)
            self.weights.append(w)
            c_in = c_out
        self.norm = 1.0  # calibration constant; 1.0 until calibrated

    @torch.no_grad()
    def _features(self, x: torch.Tensor) -> list:
        feats = []
        h = x
        for i, w in enumerate(self.weights):
            h = F.conv2d(h, w, stride=1 if i == 0 else 2, padding=1)
            h = F.relu(h)
            # Unit-normalize along channels at each spatial location.
            feats.append(h / (h.norm(dim=1, keepdim=True) + 1e-10))
        return feats

    @torch.no_grad()
    def raw_distance(self, a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
        """Uncalibrated distance per batch element."""
        if a.shape != b.shape:
            raise InputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        if a.ndim == 3:
            a, b = a.unsqueeze(0), b.unsqueeze(0)
        d = torch.zeros(a.shape[0])
        for fa, fb in zip(self._features(a), self._features(b)):
            d = d + ((fa - fb) ** 2).mean(dim=(1, 2, 3))
        return d.numpy()

    def calibrate(self, images, quantile: float = 0.99) -> float:
        """Fix the [0, 1] normalization from pairwise distances over a
        calibration set (shifted pairing covers cross-concept pairs)."""
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        if x.shape[0] < 2:
            raise InputError("calibration needs at least 2 images")
        shift = x.shape[0] // 2 or 1
        d = self.raw_distance(x, torch.roll(x, shifts=shift, dims=0))
        self.norm = float(np.quantile(d, quantile))
        if self.norm <= 0:
            raise ConfigError("degenerate calibration set (all-identical images)")
        return self.norm

    def distance(self, a, b) -> float:
        """Calibrated scalar distance in [0, 1]; 0 iff inputs identical."""
        a = torch.as_tensor(np.asarray(a), dtype=torch.float32)
        b = torch.as_tensor(np.asarray(b), dtype=torch.float32)
        d = self.raw_distance(a, b) / self.norm
        return float(np.clip(d, 0.0, 1.0).mean())

    def batch_distance(self, a, b) -> np.ndarray:
        a = torch.as_tensor(np.asarray(a), dtype=torch.float32)
        b = torch.as_tensor(np.asarray(b), dtype=torch.float32)
        return np.clip(self.raw_distance(a, b) / self.norm, 0.0, 1.0)


def perceptual_distance(a, b, metric: PerceptualMetric) -> float:
    return metric.distance(a, b)


def lpips_sets(before, after, metric: PerceptualMetric) -> np.ndarray:
    """Per-pair distances over index-aligned generation sets."""
    before = np.asarray(before)
    after = np.asarray(after)
    if before.shape[0] != after.shape[0]:
        raise InputError(f"set lengths differ: {before.shape[0]} vs {after.shape[0]}")
    if before.shape[0] == 0:
        raise InputError("empty image sets")
    return metric.batch_distance(before, after)


def lpips_da(e_scores: dict, u_scores: dict) -> float:
    """Avg over erased-concept means minus avg over retained-concept means."""
    e_means = [float(np.mean(v)) for v in e_scores.values()]
    u_means = [float(np.mean(v)) for v in u_scores.values()]
    e_avg = float(np.mean(e_means)) if e_means else 0.0
    u_avg = float(np.mean(u_means)) if u_means else 0.0
    return e_avg - u_avg


def erasure_rate(clf: ConceptClassifier, images, target_concept: str) -> float:
    """Fraction of images the eval classifier assigns to the target concept."""
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise InputError("empty image set")
    target = clf.concept_index(target_concept)
    return float((clf.predict(images) == target).mean())


def alignment_score(image_embed, reference) -> float:
    """Cosine similarity between an image embedding and a concept prototype."""
    a = np.asarray(image_embed, dtype=np.float64).ravel()
    b = np.asarray(reference, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InputError("zero-norm embedding")
    return float(a @ b / (na * nb))


def concept_alignment(clf: ConceptClassifier, images, concept_id: str) -> float:
    proto = clf.prototypes[clf.concept_index(concept_id)]
    embeds = clf.embed(np.asarray(images))
    return float(np.mean([alignment_score(e, proto) for e in embeds]))


@dataclass
class EvalProtocol:
    erased: list
    retained: list
    templates_per_concept: int = 10
    seeds_per_template: int = 5
    seed: int = 2024
    sample_steps: int = 30
    gate_threshold: float = 0.9   # base-model admissibility gate
    gate_samples: int = 200
    guidance_scale: float = 1.0   # classifier-free guidance at sampling

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def derive_seed(root_seed: int, *parts) -> int:
    h = hashlib.sha256(json.dumps([root_seed, *parts]).encode()).digest()
    return int.from_bytes(h[:4], "little")


@dataclass
class EvalReport:
    erasure_rates: dict
    base_rates: dict
    lpips_e: dict            # concept -> per-pair list
    lpips_u: dict
    lpips_da: float
    alignment: dict
    manifest: dict
    notes: list = field(default_factory=lambda: [
        "perceptual distances are an LPIPS-proxy (seed-pinned random features),"
        " not comparable to published LPIPS numbers",
        "FID not computed (out of scope)",
    ])
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "erasure_rates": self.erasure_rates,
            "base_rates": self.base_rates,
            "lpips_e": {k: list(map(float, v)) for k, v in self.lpips_e.items()},
            "lpips_u": {k: list(map(float, v)) for k, v in self.lpips_u.items()},
            "lpips_da": self.lpips_da,
            "alignment": self.alignment,
            "manifest": self.manifest,
            "notes": self.notes,
        }

    def save(self, json_path, csv_path=None):
        with open(json_path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        if csv_path:
            with open(csv_path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["concept", "role", "pair_index", "distance"])
                for role, scores in (("erased", self.lpips_e), ("retained", self.lpips_u)):
                    for concept, vals in scores.items():
                        for i, v in enumerate(vals):
                            w.writerow([concept, role, i, float(v)])


def run_eval(model: BaseUNet, sched: NoiseSchedule, adapters: AdapterStack | None,
             protocol: EvalProtocol, clf: ConceptClassifier,
             metric: PerceptualMetric) -> EvalReport:
    """Paired before/after generation under identical (template, seed); the
    admissibility gate on base-model generations runs first."""
    concepts = list(protocol.erased) + list(protocol.retained)
    for c in concepts:
        if c not in model.concept_ids():
            raise ConfigError(f"unknown concept {c!r}")

    base_images, adapted_images = {}, {}
    for concept in concepts:
        cond = model.condition(concept)
        bats, abats = [], []
        for tmpl in range(protocol.templates_per_concept):
            seed = derive_seed(protocol.seed, concept, tmpl)
            bats.append(sample(model, cond, sched, protocol.sample_steps, seed,
                               n=protocol.seeds_per_template,
                               guidance_scale=protocol.guidance_scale))
            abats.append(sample(model, cond, sched, protocol.sample_steps, seed,
                                adapters=adapters, n=protocol.seeds_per_template,
                                guidance_scale=protocol.guidance_scale))
        base_images[concept] = torch.cat(bats).numpy()
        adapted_images[concept] = torch.cat(abats).numpy()

    # Admissibility gate: the base model must reliably generate every concept
    # under evaluation before erasure metrics mean anything.
    base_rates = {}
    for concept in concepts:
        imgs = base_images[concept]
        if len(imgs) < protocol.gate_samples:
            extra = sample(model, model.condition(concept), sched, protocol.sample_steps,
                           derive_seed(protocol.seed, concept, "gate"),
                           n=protocol.gate_samples - len(imgs),
                           guidance_scale=protocol.guidance_scale).numpy()
            imgs = np.concatenate([imgs, extra])
        base_rates[concept] = erasure_rate(clf, imgs, concept)
        if base_rates[concept] < protocol.gate_threshold:
            raise PreconditionError(
                f"admissibility gate failed: base rate {base_rates[concept]:.3f} "
                f"< {protocol.gate_threshold} for concept {concept!r}")

    e_scores = {c: lpips_sets(base_images[c], adapted_images[c], metric).tolist()
                for c in protocol.erased}
    u_scores = {c: lpips_sets(base_images[c], adapted_images[c], metric).tolist()
                for c in protocol.retained}
    rates = {c: erasure_rate(clf, adapted_images[c], c) for c in concepts}
    align = {c: concept_alignment(clf, adapted_images[c], c) for c in concepts}
    manifest = {"protocol": protocol.to_dict(),
                "pairing": "identical (template, derived seed) before vs after",
                "perceptual_seed": metric.seed, "perceptual_norm": metric.norm}
    return EvalReport(erasure_rates=rates, base_rates=base_rates,
                      lpips_e=e_scores, lpips_u=u_scores,
                      lpips_da=lpips_da(e_scores, u_scores),
                      alignment=align, manifest=manifest)
