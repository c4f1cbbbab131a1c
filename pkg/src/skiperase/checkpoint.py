"""Named-tensor checkpoint container (npz archive + JSON metadata sidecar)
and content checksums used for frozen-parameter contracts."""

import hashlib
import json
import os

import numpy as np
import torch

from .errors import PreconditionError
from .schedule import make_noise_schedule
from .unet import BaseUNet, UNetConfig

FORMAT_VERSION = 1


def tensor_checksum(tensors: dict) -> str:
    """sha256 over sorted (name, dtype, shape, raw bytes); independent of the
    container file, so it is stable across re-serialization."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def param_checksum(module: torch.nn.Module) -> str:
    return tensor_checksum({n: p.detach().numpy() for n, p in module.state_dict().items()})


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sidecar(path) -> str:
    return os.fspath(path) + ".json"


def save_checkpoint(path, tensors: dict, meta: dict) -> str:
    """Write archive + sidecar; returns the content checksum recorded there."""
    arrays = {n: (t.detach().numpy() if torch.is_tensor(t) else np.asarray(t))
              for n, t in tensors.items()}
    checksum = tensor_checksum(arrays)
    np.savez(path, **arrays)
    meta = dict(meta)
    meta.update({"format_version": FORMAT_VERSION, "content_checksum": checksum})
    with open(_sidecar(path), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return checksum


def load_checkpoint(path):
    """Returns (tensors, meta); verifies the recorded content checksum."""
    if not os.path.exists(path):
        raise PreconditionError(f"checkpoint not found: {path}")
    if not os.path.exists(_sidecar(path)):
        raise PreconditionError(f"metadata sidecar not found: {_sidecar(path)}")
    with np.load(path) as z:
        tensors = {n: z[n] for n in z.files}
    with open(_sidecar(path)) as f:
        meta = json.load(f)
    checksum = tensor_checksum(tensors)
    if checksum != meta.get("content_checksum"):
        raise PreconditionError(
            f"checksum mismatch for {path}: archive {checksum} != "
            f"recorded {meta.get('content_checksum')}")
    return tensors, meta


def save_model(path, model: BaseUNet, sched, extra_meta=None) -> str:
    tensors = {n: p for n, p in model.state_dict().items()}
    meta = {"kind": "base_unet", "arch": model.cfg.to_dict(), "schedule": sched.to_dict()}
    meta.update(extra_meta or {})
    return save_checkpoint(path, tensors, meta)


def load_model(path):
    """Returns (model, schedule, meta)."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "base_unet":
        raise PreconditionError(f"{path} is not a base model checkpoint")
    arch = dict(meta["arch"])
    arch["channel_mults"] = tuple(arch["channel_mults"])
    arch["concepts"] = tuple(arch["concepts"])
    model = BaseUNet(UNetConfig(**arch))
    model.load_state_dict({n: torch.from_numpy(a) for n, a in tensors.items()})
    model.eval()
    sched = make_noise_schedule(meta["schedule"]["T"], meta["schedule"]["kind"])
    return model, sched, meta


def save_adapter(path, adapter, base_model: BaseUNet, extra_meta=None) -> str:
    tensors = {n: p for n, p in adapter.state_dict().items()}
    meta = {
        "kind": "skip_adapter",
        "target_concept": adapter.target_concept,
        "strategy": adapter.strategy,
        "base_checksum": param_checksum(base_model),
        "arch": base_model.cfg.to_dict(),
    }
    meta.update(extra_meta or {})
    return save_checkpoint(path, tensors, meta)


def save_classifier(path, clf, extra_meta=None) -> str:
    tensors = {f"net.{n}": p for n, p in clf.net.state_dict().items()}
    tensors["prototypes"] = torch.from_numpy(clf.prototypes)
    tensors["confusion"] = torch.from_numpy(clf.confusion)
    meta = {
        "kind": "concept_classifier",
        "concept_ids": clf.concept_ids,
        "holdout_accuracy": clf.holdout_accuracy,
        "fp_floor": clf.fp_floor,
        "train_manifest": clf.manifest,
    }
    meta.update(extra_meta or {})
    return save_checkpoint(path, tensors, meta)


def load_classifier(path):
    from .data import ClassifierNet, ConceptClassifier  # deferred

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "concept_classifier":
        raise PreconditionError(f"{path} is not a classifier checkpoint")
    protos = tensors.pop("prototypes")
    confusion = tensors.pop("confusion")
    net = ClassifierNet(len(meta["concept_ids"]), embed_dim=protos.shape[1])
    net.load_state_dict({n[len("net."):]: torch.from_numpy(a) for n, a in tensors.items()})
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return ConceptClassifier(net, list(meta["concept_ids"]), meta["holdout_accuracy"],
                             meta["fp_floor"], confusion, protos,
                             manifest=meta.get("train_manifest", {}))


def load_adapter(path, base_model: BaseUNet):
    """Refuses to load against a base model whose checksum differs from the
    one recorded at save time."""
    from .adapter import init_epr  # deferred: adapter imports unet

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "skip_adapter":
        raise PreconditionError(f"{path} is not an adapter checkpoint")
    base_ck = param_checksum(base_model)
    if base_ck != meta["base_checksum"]:
        raise PreconditionError(
            f"adapter {path} was trained against base {meta['base_checksum'][:12]}..., "
            f"got a model with checksum {base_ck[:12]}...")
    adapter = init_epr(base_model, meta["strategy"], meta["target_concept"])
    adapter.load_state_dict({n: torch.from_numpy(a) for n, a in tensors.items()})
    adapter.eval()
    return adapter, meta
