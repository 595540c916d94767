"""``vdecomp`` command-line interface.

Every command reads a merged :class:`~vdecomp.config.RunConfig` (defaults,
optional ``--config`` file, ``VDECOMP_OUTPUT_DIR``, flags) and writes only
below ``run.output_dir``.  Exit status: 0 success, 2 configuration error,
1 any other failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import SCHEMA, RunConfig, flag_name, flag_table, parse_config
from .distributions import GammaPosterior, GaussianFactorPosterior, low_rank_moments
from .errors import ConfigError, DecompositionError
from .imageio import component_path, read_image, write_image
from .leaf_updates import LeafState
from .losses import LossBreakdown, Task
from .metrics import auroc, average_precision, component_probabilities, ood_signature, psnr, rank_indicator, ssim
from .network import DecompositionResult, build_model, decompose
from .solver import solve_single_image
from .tasks import (
    TaskDataset, anomaly_map, denoise_output, load_dataset, make_anomaly_set, make_denoising_set,
    salt_and_pepper, save_dataset,
)
from .training import adapt, adapt_online, train, write_history_csv

COMMANDS = ("synth", "train", "decompose", "adapt", "adapt-online", "solve", "eval-denoise", "eval-uad", "diagnose")
log = logging.getLogger("vdecomp")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vdecomp", description="Variational low-rank + sparse + noise image decomposition.")
    p.add_argument("command", nargs="?", choices=COMMANDS)
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--print-config", action="store_true", help="print the effective merged configuration and exit")
    p.add_argument("--sigma", help="shorthand setting run.sigma_min and run.sigma_max together")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    for section, keys in SCHEMA.items():
        group = p.add_argument_group(f"[{section}]")
        for key, (_, default, _, desc) in keys.items():
            hint = f"default {default!r}" + (f"; {desc}" if desc else "")
            group.add_argument(flag_name(section, key), default=argparse.SUPPRESS, metavar="VALUE", help=hint)
    return p


def config_from_args(args: argparse.Namespace) -> RunConfig:
    table = flag_table()
    overrides = {}
    if args.sigma is not None:
        overrides[("run", "sigma_min")] = args.sigma
        overrides[("run", "sigma_max")] = args.sigma
    for dest, target in table.items():
        if hasattr(args, dest):
            overrides[target] = getattr(args, dest)
    return parse_config(args.config, overrides)


# ---------------------------------------------------------------- helpers


def _require(cfg: RunConfig, key: str, command: str):
    value = cfg.run[key]
    if value is None:
        raise ConfigError(f"run.{key}", f"required by '{command}' (pass {flag_name('run', key)})")
    return value


def _out(cfg: RunConfig) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_images(path: str) -> tuple[np.ndarray, list[str]]:
    """(n, c, h, w) array and image ids from a dataset dir, ``.npy`` stack or image file."""
    path = Path(path)
    if path.is_dir():
        Y = load_dataset(path).Y
        return Y, [f"{i:04d}" for i in range(len(Y))]
    if not path.exists():
        raise FileNotFoundError(f"input {path} does not exist")
    if path.suffix.lower() == ".npy":
        arr = np.load(path, allow_pickle=False)
        if arr.ndim == 4:
            return arr, [f"{i:04d}" for i in range(len(arr))]
        arr = arr[None] if arr.ndim == 2 else arr
        return arr[None], [path.stem]
    return read_image(path)[None], [path.stem]


def _model_and_hyper(cfg: RunConfig, command: str):
    model = load_checkpoint(_require(cfg, "checkpoint", command))
    r0 = model.config.r0
    hyper = cfg.hyper
    if hyper.r0 != r0:
        log.info("using the checkpoint's r0=%d", r0)
        values = {**cfg.values["hyper"]}
        hyper = type(hyper)(r0=r0, **values)
    return model, hyper


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def _to_np(t) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float64)


def _rank_counts(result: DecompositionResult, cfg: RunConfig):
    n = rank_indicator(result.leaf.gamma, cfg.run["threshold"], cfg.run["confidence"])
    return n if isinstance(n, int) else np.asarray(n).tolist()


def _write_components(directory: Path, image_id: str, result: DecompositionResult) -> dict:
    """Exact ``L``, ``S``, ``N`` arrays (.npy) and the nine 16-bit panels."""
    directory.mkdir(parents=True, exist_ok=True)
    mu_L, var_L = low_rank_moments(result.phiA, result.phiB)
    mu_o, mu_l = result.leaf.omega.mean(), result.leaf.lam.mean()
    panels = {
        "L": result.L_hat, "S": result.S_hat, "N": result.N_hat,
        "mu_L": mu_L, "sigma_L": var_L.sqrt(), "mu_S": result.phiS.mean, "sigma_S": result.phiS.std,
        "mu_Omega": mu_o, "mu_Lambda": mu_l,
    }
    written = {}
    for name in ("L", "S", "N"):
        arr = panels[name].detach().cpu().numpy()
        arr = arr[None] if arr.ndim == 2 else arr
        target = directory / f"{image_id}_{name}.npy"
        np.save(target, np.ascontiguousarray(arr), allow_pickle=False)
        written[name] = target.name
    for name, tensor in panels.items():
        arr = _to_np(tensor)
        arr = arr[None] if arr.ndim == 2 else arr
        if arr.shape[0] in (1, 3):
            write_image(component_path(directory, f"{image_id}_{name}", arr.shape[0]), arr, bits=16, signed=True)
        else:
            for c in range(arr.shape[0]):
                write_image(component_path(directory, f"{image_id}_{name}_c{c}", 1), arr[c : c + 1], bits=16, signed=True)
    return written


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _record(image_id: str, result: DecompositionResult, cfg: RunConfig, extra: dict | None = None) -> dict:
    gamma = result.leaf.gamma.mean()
    return {
        "image_id": image_id,
        "seed": result.seed,
        "losses": result.losses.to_dict(),
        "rank_indicator": _rank_counts(result, cfg),
        "threshold": cfg.run["threshold"],
        "gamma_mean": _to_np(gamma).tolist(),
        **(extra or {}),
    }


def _summary(out: Path, payload: dict) -> None:
    (out / "summary.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    print(json.dumps(payload, sort_keys=True))


def _decompose_all(model, hyper, images: np.ndarray, cfg: RunConfig) -> list[DecompositionResult]:
    seed = cfg.run["seed"]
    return [
        decompose(model, torch.as_tensor(images[i], dtype=_dtype(model)), seed=seed + i, hyper=hyper, num_samples=cfg.run["num_samples"])
        for i in range(len(images))
    ]


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> dict:
    r = cfg.run
    out = _out(cfg)
    if cfg.task is Task.DEN:
        ds = make_denoising_set(r["n"], r["size"], (r["sigma_min"], r["sigma_max"]), cfg.model.in_channels, seed=r["seed"])
    else:
        ds = make_anomaly_set(r["n"], r["size"], cfg.model.in_channels, cfg.anomaly, seed=r["seed"])
    if r["salt_pepper"] > 0:
        rng = np.random.default_rng([r["seed"], 1])
        ds = TaskDataset(np.stack([salt_and_pepper(y, r["salt_pepper"], rng) for y in ds.Y]), ds.U, ds.U_A, ds.mask, ds.sigma)
    save_dataset(ds, out, {"task": cfg.task.value, "seed": r["seed"], "sigma_min": r["sigma_min"], "sigma_max": r["sigma_max"], "salt_pepper": r["salt_pepper"]})
    previews = out / "images"
    for i in range(len(ds)):
        c = ds.Y.shape[1]
        write_image(component_path(previews, f"{i:04d}_clean", c), ds.U[i], bits=16)
        write_image(component_path(previews, f"{i:04d}_observed", c), ds.Y[i], bits=16, signed=True)
    payload = {"command": "synth", "task": cfg.task.value, "n": len(ds), "output_dir": str(out)}
    _summary(out, payload)
    return payload


def cmd_train(cfg: RunConfig) -> dict:
    data = load_dataset(_require(cfg, "data", "train"))
    out = _out(cfg)
    model = build_model(cfg.model, cfg.run["seed"])
    model, history = train(model, data, cfg.train, cfg.hyper)
    save_checkpoint(model, out / "model.ckpt")
    write_history_csv(history, out / "history.csv")
    (out / "effective_config.ini").write_text(cfg.to_ini())
    payload = {"command": "train", "epochs": len(history), "final_total": history[-1]["total"] if history else None, "checkpoint": str(out / "model.ckpt")}
    _summary(out, payload)
    return payload


def cmd_decompose(cfg: RunConfig) -> dict:
    _require(cfg, "threshold", "decompose")
    model, hyper = _model_and_hyper(cfg, "decompose")
    images, ids = _load_images(_require(cfg, "input", "decompose"))
    out = _out(cfg)
    records = []
    for image_id, result in zip(ids, _decompose_all(model, hyper, images, cfg)):
        files = _write_components(out / "components", image_id, result)
        records.append(_record(image_id, result, cfg, {"files": files}))
    _write_jsonl(out / "decompose.jsonl", records)
    payload = {"command": "decompose", "images": len(records)}
    _summary(out, payload)
    return payload


def cmd_adapt(cfg: RunConfig) -> dict:
    model, hyper = _model_and_hyper(cfg, "adapt")
    images, _ = _load_images(_require(cfg, "data", "adapt"))
    out = _out(cfg)
    model, history = adapt(model, images, cfg.adapt, hyper)
    save_checkpoint(model, out / "adapted.ckpt")
    with (out / "adapt_history.csv").open("w", newline="") as fh:
        cols = ("step", "objective", "fid", "rank", "sparse", "orth", "total")
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (row[k] if k == "step" else repr(float(row[k]))) for k in cols})
    payload = {"command": "adapt", "mode": cfg.adapt.mode.value, "steps": len(history), "checkpoint": str(out / "adapted.ckpt")}
    _summary(out, payload)
    return payload


def cmd_adapt_online(cfg: RunConfig) -> dict:
    _require(cfg, "threshold", "adapt-online")
    model, hyper = _model_and_hyper(cfg, "adapt-online")
    images, ids = _load_images(_require(cfg, "input", "adapt-online"))
    out = _out(cfg)
    records = []
    for i, image_id in enumerate(ids):
        Y = torch.as_tensor(images[i], dtype=_dtype(model))
        result, _ = adapt_online(model, Y, cfg.adapt, hyper, seed=cfg.run["seed"] + i)
        files = _write_components(out / "components", image_id, result)
        records.append(_record(image_id, result, cfg, {"files": files, "adapt_steps": len(result.history)}))
    _write_jsonl(out / "adapt_online.jsonl", records)
    payload = {"command": "adapt-online", "images": len(records), "mode": cfg.adapt.mode.value}
    _summary(out, payload)
    return payload


def _stack_channels(results: list[DecompositionResult]) -> DecompositionResult:
    """Join per-channel solver results into one multi-channel result."""
    if len(results) == 1:
        return results[0]
    def g(attr):
        return torch.stack([getattr(r, attr) for r in results])

    def phi(attr):
        return GaussianFactorPosterior(torch.stack([getattr(r, attr).mean for r in results]), torch.stack([getattr(r, attr).std for r in results]))

    def gam(attr):
        return GammaPosterior(torch.stack([getattr(r.leaf, attr).alpha for r in results]), torch.stack([getattr(r.leaf, attr).beta for r in results]))

    losses = LossBreakdown(**{k: sum(getattr(r.losses, k) for r in results) for k in results[0].losses.to_dict()})
    return DecompositionResult(
        phi("phiA"), phi("phiB"), phi("phiS"), g("A_hat"), g("B_hat"), g("S_hat"), g("L_hat"), g("N_hat"),
        LeafState(gam("gamma"), gam("omega"), gam("lam")), losses, results[0].seed, [r.history for r in results],
    )


def cmd_solve(cfg: RunConfig) -> dict:
    _require(cfg, "threshold", "solve")
    images, ids = _load_images(_require(cfg, "input", "solve"))
    out = _out(cfg)
    hyper = cfg.hyper
    records = []
    with (out / "trace.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "channel", "round", "negative_elbo"])
        for image_id, img in zip(ids, images):
            per_channel = [solve_single_image(img[c], hyper, cfg.solver) for c in range(img.shape[0])]
            for c, res in enumerate(per_channel):
                for k, value in enumerate(res.history):
                    writer.writerow([image_id, c, k, repr(float(value))])
            result = _stack_channels(per_channel)
            files = _write_components(out / "components", image_id, result)
            records.append(_record(image_id, result, cfg, {"files": files, "rounds": [len(r.history) - 1 for r in per_channel]}))
    _write_jsonl(out / "solve.jsonl", records)
    payload = {"command": "solve", "images": len(records)}
    _summary(out, payload)
    return payload


def _labelled(cfg: RunConfig, command: str) -> TaskDataset:
    data = load_dataset(_require(cfg, "data", command))
    if data.U is None:
        raise ValueError(f"{command} needs ground truth (U.npy) in the dataset directory")
    return data


def cmd_eval_denoise(cfg: RunConfig) -> dict:
    model, hyper = _model_and_hyper(cfg, "eval-denoise")
    data = _labelled(cfg, "eval-denoise")
    out = _out(cfg)
    results = _decompose_all(model, hyper, data.Y, cfg)
    denoised = np.stack([_to_np(denoise_output(r)) for r in results])
    np.save(out / "denoised.npy", denoised, allow_pickle=False)
    rows = []
    for i in range(len(data)):
        write_image(component_path(out / "denoised", f"{i:04d}", denoised.shape[1]), denoised[i], bits=16)
        rows.append({"image_id": f"{i:04d}", "psnr": psnr(denoised[i], data.U[i]), "ssim": ssim(denoised[i], data.U[i])})
    with (out / "metrics.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("image_id", "psnr", "ssim"))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (v if k == "image_id" else repr(v)) for k, v in row.items()})
    payload = {
        "command": "eval-denoise",
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
        "mean_psnr_input": float(np.mean([psnr(np.clip(data.Y[i], 0, 1), data.U[i]) for i in range(len(data))])),
    }
    _summary(out, payload)
    return payload


def cmd_eval_uad(cfg: RunConfig) -> dict:
    model, hyper = _model_and_hyper(cfg, "eval-uad")
    data = _labelled(cfg, "eval-uad")
    if data.mask is None:
        raise ValueError("eval-uad needs mask.npy in the dataset directory")
    out = _out(cfg)
    results = _decompose_all(model, hyper, data.Y, cfg)
    maps = np.stack([anomaly_map(r, sigma=cfg.run["blur_sigma"], mode=cfg.run["score_mode"]) for r in results])
    np.save(out / "anomaly_maps.npy", maps, allow_pickle=False)
    with (out / "metrics.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "auroc", "ap"])
        for i in range(len(data)):
            write_image(out / "maps" / f"{i:04d}.pgm", maps[i], bits=16)
            labels = data.mask[i].ravel()
            both = 0 < labels.sum() < labels.size
            a = repr(auroc(maps[i], labels)) if both else ""
            p = repr(average_precision(maps[i], labels)) if labels.any() else ""
            writer.writerow([f"{i:04d}", a, p])
    labels = data.mask.ravel()
    payload = {
        "command": "eval-uad",
        "pixel_auroc": auroc(maps.ravel(), labels),
        "pixel_ap": average_precision(maps.ravel(), labels),
        "base_rate": float(labels.mean()),
    }
    _summary(out, payload)
    return payload


def cmd_diagnose(cfg: RunConfig) -> dict:
    threshold = _require(cfg, "threshold", "diagnose")
    model, hyper = _model_and_hyper(cfg, "diagnose")
    images, ids = _load_images(_require(cfg, "data", "diagnose"))
    out = _out(cfg)
    results = _decompose_all(model, hyper, images, cfg)
    inv_all, ranks = [], []
    with (out / "signatures.csv").open("w", newline="") as fs, (out / "gamma.csv").open("w", newline="") as fg:
        sig, gam = csv.writer(fs), csv.writer(fg)
        sig.writerow(["image_id", "l_rank", "l_sparse"])
        gam.writerow(["image_id", "channel", "component", "gamma_mean", "inverse_gamma_mean", "probability"])
        for image_id, res in zip(ids, results):
            s = ood_signature(res)
            sig.writerow([image_id, repr(s.l_rank), repr(s.l_sparse)])
            g = np.atleast_2d(_to_np(res.leaf.gamma.mean()))
            prob = np.atleast_2d(component_probabilities(res.leaf.gamma, threshold))
            for c in range(g.shape[0]):
                for k in range(g.shape[1]):
                    gam.writerow([image_id, c, k, repr(float(g[c, k])), repr(float(1 / g[c, k])), repr(float(prob[c, k]))])
            inv_all.append(1 / g.ravel())
            ranks.append(_rank_counts(res, cfg))
    log_inv = np.log10(np.concatenate(inv_all))
    counts, edges = np.histogram(log_inv, bins=30)
    with (out / "gamma_hist.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["log10_inv_gamma_lo", "log10_inv_gamma_hi", "count"])
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            writer.writerow([repr(float(lo)), repr(float(hi)), int(n)])
    payload = {"command": "diagnose", "images": len(results), "rank_indicator": ranks, "threshold": threshold}
    _summary(out, payload)
    return payload


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "decompose": cmd_decompose, "adapt": cmd_adapt,
    "adapt-online": cmd_adapt_online, "solve": cmd_solve, "eval-denoise": cmd_eval_denoise,
    "eval-uad": cmd_eval_uad, "diagnose": cmd_diagnose,
}


def run(command: str, cfg: RunConfig) -> int:
    try:
        HANDLERS[command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DecompositionError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.print_config:
        sys.stdout.write(cfg.to_ini())
        return 0
    if args.command is None:
        parser.error("a command is required unless --print-config is given")
    return run(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
