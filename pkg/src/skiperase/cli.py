"""Batch command surface: data generation, base/classifier training, the two
erasure stages, sampling, ablations, evaluation and plotting. Every command
writes a RunManifest; inputs are verified against their recorded checksums.

Exit codes: 0 ok, 2 config error, 3 precondition/hash error, 4 numerical
failure. TOML configs are human-edited; flag values override config keys.
"""

import argparse
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .adapter import AdapterStack, StackEntry, init_epr
from .analysis import (AblationMask, default_group_scheme, group_effect_report,
                       render_modulation_heatmap, write_group_report_csv, GroupScheme)
from .checkpoint import (file_checksum, load_adapter, load_classifier, load_model,
                         save_adapter, save_classifier, save_model, tensor_checksum)
from .data import (BaseTrainConfig, Dataset, SyntheticConceptSpec, default_world,
                   generate_dataset, train_base, train_classifier)
from .diffusion import sample
from .errors import ConfigError, InputError, NumericalError, PreconditionError, SkipEraseError
from .evaluation import EvalProtocol, PerceptualMetric, derive_seed, run_eval
from .manifest import RunManifest
from .modulation import ModulationConfig, ModulationFactors, init_modulation, run_tlmo
from .schedule import make_noise_schedule
from .training import EraseConfig, finetune_epr, write_trace_csv
from .unet import UNetConfig

OUTPUT_ROOT_ENV = "SKIPERASE_ROOT"


def _root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, ".")


def _resolve(path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(_root(), path)


def _load_config(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise PreconditionError(f"config file not found: {path}")
    with open(path, "rb") as f:
        return tomllib.load(f)


def _cfg(config: dict, args, key: str, default):
    """Flag value wins over config key wins over default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return config.get(key, default)


def _save_images(images, out_dir, prefix="img"):
    """PNG for eyes, raw float arrays for exact regression."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    arr = images.numpy() if hasattr(images, "numpy") else np.asarray(images)
    np.save(os.path.join(out_dir, f"{prefix}.npy"), arr)
    for i, img in enumerate(arr):
        u8 = ((np.clip(img, -1, 1) + 1) * 127.5).round().astype(np.uint8)
        Image.fromarray(u8.transpose(1, 2, 0)).save(
            os.path.join(out_dir, f"{prefix}_{i:03d}.png"))
    return os.path.join(out_dir, f"{prefix}.npy")


def _write_manifest(out_path, command, config, seeds, input_hashes, output_hashes,
                    output_paths):
    m = RunManifest(command=command, config=config, seeds=seeds,
                    input_hashes=input_hashes, output_paths=output_paths,
                    output_hashes=output_hashes)
    m.save(out_path)


def cmd_gen_data(args):
    config = _load_config(args.config)
    seed = _cfg(config, args, "seed", 0)
    count = _cfg(config, args, "count", 2000)
    size = _cfg(config, args, "size", 32)
    specs = [SyntheticConceptSpec(**s) if isinstance(s, dict) else s
             for s in config.get("specs", default_world(count))]
    if "specs" not in config:
        specs = default_world(count)
    ds = generate_dataset(specs, seed=seed, size=size)
    out = _resolve(args.out)
    ds.save(out)
    data_hash = tensor_checksum({"images": ds.images, "labels": ds.labels})
    _write_manifest(os.path.join(out, "run_manifest.json"), "gen-data",
                    {"count": count, "size": size, "specs": ds.manifest["specs"]},
                    {"seed": seed}, {}, {"dataset": data_hash}, {"dataset": out})
    print(f"dataset: {out} ({len(ds.labels)} images, {len(ds.concept_ids)} concepts)")
    return 0


def cmd_train_base(args):
    config = _load_config(args.config)
    out = _resolve(args.out)
    ds = Dataset.load(_resolve(args.data))
    arch_cfg = config.get("arch", {})
    arch_cfg.setdefault("image_size", ds.manifest.get("size", 32))
    arch = UNetConfig(concepts=tuple(ds.concept_ids),
                      **{k: (tuple(v) if isinstance(v, list) else v)
                         for k, v in arch_cfg.items()})
    sched = make_noise_schedule(_cfg(config, args, "timesteps", 1000),
                                _cfg(config, args, "schedule", "linear"))
    tcfg = BaseTrainConfig(
        steps=_cfg(config, args, "steps", 3000),
        batch=_cfg(config, args, "batch", 64),
        learning_rate=_cfg(config, args, "learning_rate", 2e-3),
        cond_dropout=config.get("cond_dropout", 0.15),
        seed=_cfg(config, args, "seed", 0),
    )
    model, trace = train_base(ds, arch, sched, tcfg)
    ckpt_hash = save_model(out, model, sched)
    write_trace_csv(trace, out + ".loss.csv")
    data_hash = tensor_checksum({"images": ds.images, "labels": ds.labels})
    _write_manifest(out + ".manifest.json", "train-base",
                    {"arch": arch.to_dict(), "train": tcfg.__dict__,
                     "schedule": sched.to_dict()},
                    {"seed": tcfg.seed}, {"dataset": data_hash},
                    {"checkpoint": ckpt_hash}, {"checkpoint": out})
    print(f"base model: {out} (final loss {trace[-1]['loss']:.4f})")
    return 0


def cmd_train_classifier(args):
    config = _load_config(args.config)
    out = _resolve(args.out)
    ds = Dataset.load(_resolve(args.data))
    seed = _cfg(config, args, "seed", 0)
    clf = train_classifier(ds, seed=seed, epochs=config.get("epochs", 3))
    ckpt_hash = save_classifier(out, clf)
    data_hash = tensor_checksum({"images": ds.images, "labels": ds.labels})
    _write_manifest(out + ".manifest.json", "train-classifier",
                    {"epochs": config.get("epochs", 3)}, {"seed": seed},
                    {"dataset": data_hash}, {"checkpoint": ckpt_hash},
                    {"checkpoint": out})
    print(f"classifier: {out} (holdout accuracy {clf.holdout_accuracy:.3f}, "
          f"fp floor {clf.fp_floor:.3f})")
    return 0


def cmd_erase(args):
    config = _load_config(args.config)
    base_path = _resolve(args.base)
    model, sched, _ = load_model(base_path)
    cfg = EraseConfig(
        strength=_cfg(config, args, "strength", 1.0),
        steps=_cfg(config, args, "steps", 300),
        learning_rate=_cfg(config, args, "learning_rate", 1e-3),
        batch=_cfg(config, args, "batch", 4),
        quick_steps=_cfg(config, args, "quick_steps", 20),
        seed=_cfg(config, args, "seed", 0),
        t_min=config.get("t_min", 0), t_max=config.get("t_max"),
    )
    strategy = _cfg(config, args, "strategy", "cross_attention_only")
    adapter = init_epr(model, strategy, args.concept)
    out = _resolve(args.out)
    adapter, trace = finetune_epr(model, adapter, sched, cfg,
                                  diag_path=out + ".diag.json")
    ckpt_hash = save_adapter(out, adapter, model, {"erase_config": cfg.__dict__})
    write_trace_csv(trace, out + ".loss.csv")
    _write_manifest(out + ".manifest.json", "erase",
                    {"concept": args.concept, "strategy": strategy, **cfg.__dict__},
                    {"seed": cfg.seed}, {"base": file_checksum(base_path)},
                    {"adapter": ckpt_hash}, {"adapter": out})
    print(f"adapter: {out} (loss {trace[0]['total']:.4f} -> {trace[-1]['total']:.4f})")
    return 0


def cmd_modulate(args):
    config = _load_config(args.config)
    base_path, adapter_path = _resolve(args.base), _resolve(args.adapter)
    model, sched, _ = load_model(base_path)
    adapter, _ = load_adapter(adapter_path, model)
    cfg = ModulationConfig(
        preserve_weight=_cfg(config, args, "preserve_weight", 1.0),
        strength=_cfg(config, args, "strength", 1.0),
        steps=_cfg(config, args, "steps", 200),
        learning_rate=_cfg(config, args, "learning_rate", 1e-2),
        batch=_cfg(config, args, "batch", 4),
        quick_steps=_cfg(config, args, "quick_steps", 20),
        seed=_cfg(config, args, "seed", 0),
        mode=_cfg(config, args, "mode", "combined"),
    )
    groups = _cfg(config, args, "groups", 20)
    m = init_modulation(sched.T, len(adapter.zero_convs), groups)
    if cfg.steps > 0:
        m, trace = run_tlmo(model, adapter, m, sched, cfg)
    else:
        trace = []
    out = _resolve(args.out)
    m.save(out)
    write_trace_csv(trace, out + ".loss.csv")
    _write_manifest(out + ".manifest.json", "modulate",
                    {"groups": groups, **cfg.__dict__}, {"seed": cfg.seed},
                    {"base": file_checksum(base_path),
                     "adapter": file_checksum(adapter_path)},
                    {"grid": tensor_checksum({"grid": m.grid.numpy()})},
                    {"grid": out})
    print(f"modulation grid: {out} ({groups}x{m.L})")
    return 0


def _load_stack(args, model):
    """Optional adapter (+ optional grid) shared by generate/ablate/eval."""
    if not getattr(args, "adapter", None):
        return None
    adapter, _ = load_adapter(_resolve(args.adapter), model)
    modulation = None
    if getattr(args, "grid", None):
        grid_path = _resolve(args.grid)
        if not os.path.exists(grid_path):
            raise PreconditionError(f"grid file not found: {grid_path}")
        modulation = ModulationFactors.load(grid_path)
    return AdapterStack([StackEntry(adapter, modulation=modulation)])


def cmd_generate(args):
    model, sched, _ = load_model(_resolve(args.base))
    stack = _load_stack(args, model)
    imgs = sample(model, model.condition(args.concept), sched,
                  args.steps or 30, args.seed or 0, adapters=stack, n=args.n,
                  guidance_scale=args.guidance_scale)
    out = _resolve(args.out)
    npy_path = _save_images(imgs, out, prefix=args.concept)
    _write_manifest(os.path.join(out, "run_manifest.json"), "generate",
                    {"concept": args.concept, "steps": args.steps or 30, "n": args.n,
                     "guidance_scale": args.guidance_scale},
                    {"seed": args.seed or 0},
                    {"base": file_checksum(_resolve(args.base))},
                    {"images": tensor_checksum({"images": imgs.numpy()})},
                    {"images": npy_path})
    print(f"images: {out}")
    return 0


def cmd_ablate(args):
    config = _load_config(args.config)
    model, sched, _ = load_model(_resolve(args.base))
    adapter, _ = load_adapter(_resolve(args.adapter), model)
    modulation = None
    if getattr(args, "grid", None):
        modulation = ModulationFactors.load(_resolve(args.grid))
    scheme = default_group_scheme(sched.T, len(adapter.zero_convs))
    concepts = args.concepts.split(",") if args.concepts else [adapter.target_concept]
    seeds = [int(s) for s in (args.seeds or "0,1,2").split(",")]
    metric = PerceptualMetric()
    rows = group_effect_report(model, adapter, sched, scheme, concepts, seeds,
                               metric=metric, steps=args.steps or 30,
                               modulation=modulation)
    out = _resolve(args.out)
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "group_effects.csv")
    write_group_report_csv(rows, csv_path)
    _plot_group_bars(rows, os.path.join(out, "group_effects.png"))
    _write_manifest(os.path.join(out, "run_manifest.json"), "ablate",
                    {"concepts": concepts, "seeds": seeds,
                     "note": "spectral-energy quantification is an artifact-level "
                             "operationalization of visual group-ablation claims"},
                    {"seeds": seeds},
                    {"base": file_checksum(_resolve(args.base)),
                     "adapter": file_checksum(_resolve(args.adapter))},
                    {"report": file_checksum(csv_path)}, {"report": csv_path})
    print(f"ablation report: {csv_path}")
    return 0


def cmd_eval(args):
    config = _load_config(args.config)
    model, sched, _ = load_model(_resolve(args.base))
    clf = load_classifier(_resolve(args.classifier))
    stack = _load_stack(args, model)
    erased = (args.erased.split(",") if args.erased
              else config.get("erased", []))
    retained = (args.retained.split(",") if args.retained
                else config.get("retained", [c for c in model.cfg.concepts
                                             if c not in erased]))
    protocol = EvalProtocol(
        erased=erased, retained=retained,
        templates_per_concept=config.get("templates_per_concept", 10),
        seeds_per_template=config.get("seeds_per_template", 5),
        seed=_cfg(config, args, "seed", 2024),
        sample_steps=config.get("sample_steps", args.steps or 30),
        gate_threshold=config.get("gate_threshold", 0.9),
        gate_samples=config.get("gate_samples", 200),
        guidance_scale=config.get("guidance_scale", 1.0),
    )
    metric = PerceptualMetric()
    metric.calibrate(_calibration_images(model, sched, protocol))
    report = run_eval(model, sched, stack, protocol, clf, metric)
    out = _resolve(args.out)
    os.makedirs(out, exist_ok=True)
    json_path = os.path.join(out, "report.json")
    report.save(json_path, os.path.join(out, "pairs.csv"))
    input_hashes = {"base": file_checksum(_resolve(args.base)),
                    "classifier": file_checksum(_resolve(args.classifier))}
    if getattr(args, "adapter", None):
        input_hashes["adapter"] = file_checksum(_resolve(args.adapter))
    _write_manifest(os.path.join(out, "run_manifest.json"), "eval",
                    protocol.to_dict(), {"seed": protocol.seed}, input_hashes,
                    {"report": file_checksum(json_path)}, {"report": json_path})
    print(f"eval report: {json_path} (trade-off score {report.lpips_da:+.4f})")
    return 0


def _calibration_images(model, sched, protocol, n: int = 48):
    """Base-model generations across all concepts, used to pin the perceptual
    metric's [0, 1] range."""
    import torch
    imgs = []
    per = max(2, n // max(1, len(model.cfg.concepts)))
    for c in model.cfg.concepts:
        imgs.append(sample(model, model.condition(c), sched, protocol.sample_steps,
                           seed=derive_seed(protocol.seed, "calib", c), n=per,
                           guidance_scale=protocol.guidance_scale))
    return torch.cat(imgs).numpy()


def _plot_group_bars(rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = [r for r in rows if r["group_id"] != "full"]
    x = np.arange(len(data))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - 0.2, [r["low_delta"] for r in data], width=0.4, label="low-freq delta")
    ax.bar(x + 0.2, [r["high_delta"] for r in data], width=0.4, label="high-freq delta")
    ax.set_xticks(x, [f"group {r['group_id']}\nlayers {r['layers']}" for r in data])
    ax.set_ylabel("mean spectral energy change vs base")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_plot(args):
    out = _resolve(args.out)
    os.makedirs(os.path.dirname(os.path.abspath(out)) or ".", exist_ok=True)
    if args.grid:
        m = ModulationFactors.load(_resolve(args.grid))
        scheme = default_group_scheme(m.T, m.L)
        render_modulation_heatmap(m, scheme, out)
    elif args.trace:
        import csv as _csv
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        with open(_resolve(args.trace)) as f:
            rows = list(_csv.DictReader(f))
        fig, ax = plt.subplots()
        ax.plot([float(r.get("total", r.get("loss", 0))) for r in rows])
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        fig.tight_layout()
        fig.savefig(out, dpi=120)
        plt.close(fig)
    else:
        raise ConfigError("plot needs --grid or --trace")
    _write_manifest(out + ".manifest.json", "plot",
                    {"grid": args.grid, "trace": args.trace}, {},
                    {}, {"figure": file_checksum(out)}, {"figure": out})
    print(f"figure: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skiperase",
                                description="Concept erasure on a toy conditional "
                                            "diffusion model via skip-connection adapters.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML config (flags override keys)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("gen-data", help="generate the synthetic concept dataset")
    common(sp)
    sp.add_argument("--count", type=int)
    sp.add_argument("--size", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-base", help="train the frozen base denoiser")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--learning-rate", dest="learning_rate", type=float)
    sp.add_argument("--timesteps", type=int)
    sp.add_argument("--schedule", choices=["linear", "cosine"])
    sp.set_defaults(func=cmd_train_base)

    sp = sub.add_parser("train-classifier", help="train the eval classifier")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_train_classifier)

    sp = sub.add_parser("erase", help="stage 1: fine-tune a skip adapter")
    common(sp)
    sp.add_argument("--base", required=True)
    sp.add_argument("--concept", required=True)
    sp.add_argument("--strategy", choices=["cross_attention_only", "full"])
    sp.add_argument("--strength", type=float, help="erasure strength (eta)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--learning-rate", dest="learning_rate", type=float)
    sp.add_argument("--quick-steps", dest="quick_steps", type=int)
    sp.set_defaults(func=cmd_erase)

    sp = sub.add_parser("modulate", help="stage 2: train the timestep-layer grid")
    common(sp)
    sp.add_argument("--base", required=True)
    sp.add_argument("--adapter", required=True)
    sp.add_argument("--preserve-weight", dest="preserve_weight", type=float)
    sp.add_argument("--strength", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--learning-rate", dest="learning_rate", type=float)
    sp.add_argument("--quick-steps", dest="quick_steps", type=int)
    sp.add_argument("--groups", type=int)
    sp.add_argument("--mode", choices=["combined", "timestep_only", "layer_only"])
    sp.set_defaults(func=cmd_modulate)

    sp = sub.add_parser("generate", help="sample images")
    common(sp)
    sp.add_argument("--base", required=True)
    sp.add_argument("--adapter")
    sp.add_argument("--grid")
    sp.add_argument("--concept", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--guidance-scale", dest="guidance_scale", type=float, default=1.0)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("ablate", help="layer/timestep group ablation report")
    common(sp)
    sp.add_argument("--base", required=True)
    sp.add_argument("--adapter", required=True)
    sp.add_argument("--grid")
    sp.add_argument("--concepts", help="comma-separated; default adapter target")
    sp.add_argument("--seeds", help="comma-separated sampling seeds")
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("eval", help="erasure/preservation evaluation report")
    common(sp)
    sp.add_argument("--base", required=True)
    sp.add_argument("--adapter")
    sp.add_argument("--grid")
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--erased", help="comma-separated erased concepts")
    sp.add_argument("--retained", help="comma-separated retained concepts")
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("plot", help="render heatmaps / loss curves")
    common(sp)
    sp.add_argument("--grid")
    sp.add_argument("--trace")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PreconditionError as e:
        print(f"precondition error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
