"""Command-line entry point: fit-toy, make-data, invert, attack, evaluate, reconstruct.

Output layout under ``--out``::

    bundle/               fitted toy backend (fit-toy)
    records/<id>/         inversion record, reconstruction, delta, loss trace
    adv/<id>.png          adversarial images (8-bit)
    recon/<id>.png        reconstructions (reconstruct)
    results/<id>.json     per-image attack outcome
    report.csv, report.json
    manifest.json         config hash, code version, per-stage checksums
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attack import AttackResult, run_attack, save_result
from .config import AttackConfig
from .diffusion import load_array, save_array
from .harness import build_report, parse_defense, write_report
from .inversion import load_record, map_image, psnr_from_mse, reconstruct, save_record
from .models.base import registry
from .models.data import load_dataset, make_dataset, save_dataset
from .models.toy import FitConfig, ToyBackendBundle, fit_toy_bundle

log = logging.getLogger("contentattack")

# acceptance thresholds recorded with every fitted bundle and copied into the manifest
THRESHOLDS = {"min_mean_psnr_db": 25.0, "min_label_keep_fraction": 0.9,
              "min_white_box_asr": 80.0, "min_transfer_margin_pp": 15.0}

# config-file key -> (flag dest, parser)
CONFIG_KEYS = {
    "backend": str, "bundle": str, "surrogate": str, "targets": str, "dataset": str,
    "prompts": str, "out": str, "defense": str, "seed": int, "limit": int,
    "t": int, "ni": int, "na": int, "eta": float, "kappa": float, "w": float,
    "beta": float, "zeta": float, "mu": float, "rho_mode": str, "iters": int,
}


@dataclass
class RunConfig:
    backend: str = "toy"
    bundle: str | None = None
    surrogate: str = "toy-vit"
    targets: list[str] = field(default_factory=lambda: ["toy-vit", "toy-cnn"])
    dataset: str | None = None
    prompts: str | None = None
    out: str = "out"
    defenses: list[str] = field(default_factory=lambda: ["jpeg:75", "bitred:3"])
    limit: int | None = None
    attack: AttackConfig = field(default_factory=AttackConfig)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().lower().replace("-", "_")
        if not sep or key not in CONFIG_KEYS:
            raise SystemExit(f"{path}:{n}: unrecognized config line {line!r}")
        values[key] = CONFIG_KEYS[key](value.strip())
    return values


def resolve_config(args) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    base = AttackConfig()
    attack = replace(
        base,
        T=values.get("t", base.T), N_i=values.get("ni", base.N_i), N_a=values.get("na", base.N_a),
        eta=values.get("eta", base.eta), kappa=values.get("kappa", base.kappa), w=values.get("w", base.w),
        beta=values.get("beta", base.beta), zeta=values.get("zeta", base.zeta), mu=values.get("mu", base.mu),
        seed=values.get("seed", base.seed), rho_mode=values.get("rho_mode", base.rho_mode),
    )
    cfg = RunConfig(attack=attack)
    for key in ("backend", "bundle", "surrogate", "dataset", "prompts", "out", "limit"):
        if key in values:
            setattr(cfg, key, values[key])
    if "targets" in values:
        cfg.targets = [t.strip() for t in values["targets"].split(",") if t.strip()]
    if "defense" in values:
        cfg.defenses = [d.strip() for d in values["defense"].split(",") if d.strip() and d.strip() != "none"]
    for d in cfg.defenses:
        parse_defense(d)
    return cfg


def default_bundle_dir() -> Path:
    return Path(str(resources.files("contentattack") / "data" / "toy_bundle"))


def load_backend(cfg: RunConfig):
    """Register the toy bundle (explicit, ``out/bundle`` or shipped) and return its backend."""
    if cfg.backend != "toy":
        return registry.backend(cfg.backend)
    candidates = [Path(cfg.bundle)] if cfg.bundle else [Path(cfg.out) / "bundle", default_bundle_dir()]
    for d in candidates:
        if (d / "bundle.json").is_file():
            bundle = ToyBackendBundle.load(d)
            bundle.register("toy")
            return registry.backend("toy"), bundle
    raise SystemExit(f"no toy bundle found in {[str(c) for c in candidates]}; run fit-toy first")


def load_images(cfg: RunConfig):
    if not cfg.dataset:
        raise SystemExit("--dataset is required (create one with make-data)")
    images, labels, prompts = load_dataset(cfg.dataset)
    if cfg.prompts:
        p = Path(cfg.prompts)
        if p.is_file():
            prompts = [line.strip() for line in p.read_text().splitlines()]
            if len(prompts) < len(images):
                raise SystemExit(f"{p} has {len(prompts)} prompts for {len(images)} images")
        else:
            prompts = [cfg.prompts] * len(images)
    n = len(images) if cfg.limit is None else min(cfg.limit, len(images))
    return torch.from_numpy(images[:n]), torch.from_numpy(labels[:n]), prompts[:n]


def image_id(i: int) -> str:
    return f"{i:05d}"


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def update_manifest(cfg: RunConfig, stage: str, checksums: dict, extra: dict | None = None):
    path = Path(cfg.out) / "manifest.json"
    manifest = json.loads(path.read_text()) if path.is_file() else {}
    manifest.update({"code_version": __version__, "config_sha256": cfg.digest(),
                     "config": asdict(cfg), "thresholds": THRESHOLDS})
    manifest.setdefault("stages", {})[stage] = {"checksums": checksums, **(extra or {})}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def cmd_fit_toy(cfg: RunConfig, args) -> int:
    from .models.gradcheck import check_input_gradient

    fit = FitConfig(seed=cfg.attack.seed)
    if args.iters is not None:
        fit = replace(fit, diffusion_iters=args.iters)
    if args.classifier_epochs is not None:
        fit = replace(fit, classifier_epochs=args.classifier_epochs)
    if cfg.dataset:
        if not Path(cfg.dataset).is_file():
            raise SystemExit(f"dataset not found: {cfg.dataset}")
        dataset = load_dataset(cfg.dataset)
        fit = replace(fit, n_heldout=min(fit.n_heldout, len(dataset[0]) // 10 or 1))
    else:
        dataset = None
    bundle = fit_toy_bundle(fit, dataset)
    gen = torch.Generator().manual_seed(fit.seed)
    probe = torch.rand((2, *bundle.image_shape), generator=gen)
    for name, clf in bundle.classifiers().items():
        err = max(check_input_gradient(clf, x, 0) for x in probe)
        bundle.metrics[f"{name}_gradcheck_rel_error"] = err
        if err >= 1e-3:
            raise SystemExit(f"gradient check failed for {name}: relative error {err:.2e}")
    bundle.metrics["thresholds"] = THRESHOLDS
    out = bundle.save(Path(cfg.out) / "bundle")
    update_manifest(cfg, "fit-toy", {"weights_sha256": bundle.weights_digest()}, {"metrics": bundle.metrics})
    print(f"bundle written to {out}; weights sha256 {bundle.weights_digest()}")
    print(json.dumps(bundle.metrics, indent=2, sort_keys=True))
    return 0


def cmd_make_data(cfg: RunConfig, args) -> int:
    n = args.n if args.n is not None else 64
    images, labels, prompts = make_dataset(n, cfg.attack.seed)
    path = Path(cfg.dataset or Path(cfg.out) / "dataset.npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(path, images, labels, prompts)
    print(f"wrote {n} images to {path}")
    return 0


def cmd_invert(cfg: RunConfig, args) -> int:
    backend, _ = load_backend(cfg)
    images, labels, prompts = load_images(cfg)
    root = Path(cfg.out) / "records"
    errors, failures, done = [], 0, 0
    for i, (x, p) in enumerate(zip(images, prompts)):
        d = root / image_id(i)
        if (d / "meta.json").is_file():
            errors.append(json.loads((d / "meta.json").read_text())["reconstruction_error"])
            continue
        try:
            record = map_image(x, p, backend, cfg.attack)
        except Exception as exc:
            failures += 1
            log.error("inversion failed for image %s: %s", image_id(i), exc)
            continue
        save_record(record, d)
        save_array(d / "reconstruction.f32", reconstruct(record, backend))
        errors.append(record.reconstruction_error)
        done += 1
        log.info("image %s psnr %.2f dB", image_id(i), record.psnr)
    checksums = {image_id(i): _sha256_file(root / image_id(i) / "z_T.f32")
                 for i in range(len(images)) if (root / image_id(i) / "z_T.f32").is_file()}
    mean_psnr = float(np.mean([psnr_from_mse(e) for e in errors])) if errors else float("nan")
    update_manifest(cfg, "invert", checksums, {"mean_psnr_db": mean_psnr, "failures": failures})
    print(f"records: {len(errors)} ({done} new, {failures} failed); mean reconstruction PSNR {mean_psnr:.2f} dB")
    return 1 if failures else 0


def cmd_attack(cfg: RunConfig, args) -> int:
    backend, _ = load_backend(cfg)
    images, labels, _ = load_images(cfg)
    surrogate = registry.classifier(cfg.surrogate)
    targets = {t: registry.classifier(t) for t in cfg.targets}
    out = Path(cfg.out)
    torch.manual_seed(cfg.attack.seed)
    successes, count, failures = 0, 0, 0
    checksums = {}
    for i, y in enumerate(labels.tolist()):
        iid = image_id(i)
        result_path = out / "results" / f"{iid}.json"
        rec_dir = out / "records" / iid
        if result_path.is_file():
            prior = json.loads(result_path.read_text())
            if prior.get("error") is None:
                successes += prior["surrogate_success"]
                count += 1
                checksums[iid] = prior["delta_sha256"]
                continue
        if not (rec_dir / "meta.json").is_file():
            log.error("no inversion record for image %s; run invert first", iid)
            failures += 1
            continue
        try:
            record = load_record(rec_dir)
            result = run_attack(record, surrogate, y, cfg.attack, backend, targets)
        except Exception as exc:
            log.error("attack failed for image %s: %s", iid, exc)
            result = AttackResult(None, None, y, error=f"{type(exc).__name__}: {exc}")
            failures += 1
        result_dict = result.to_dict()
        save_result(result, out, iid)
        if result.adversarial is not None:
            save_array(rec_dir / "adversarial.f32", result.adversarial)
            successes += result.surrogate_success
            count += 1
            checksums[iid] = result_dict["delta_sha256"]
    asr = 100.0 * successes / count if count else float("nan")
    update_manifest(cfg, "attack", checksums, {"white_box_asr": asr, "surrogate": cfg.surrogate,
                                               "failures": failures})
    print(f"attacked {count} images with surrogate {cfg.surrogate}; white-box ASR {asr:.2f}%")
    return 1 if failures else 0


def _load_stack(paths):
    return torch.cat([torch.from_numpy(load_array(p)[0]).reshape(1, *load_array(p)[0].shape[-3:])
                      for p in paths])


def cmd_evaluate(cfg: RunConfig, args) -> int:
    load_backend(cfg)
    images, labels, _ = load_images(cfg)
    out = Path(cfg.out)
    ids = [image_id(i) for i in range(len(images))]
    recon_paths = [out / "records" / i / "reconstruction.f32" for i in ids]
    recons = _load_stack(recon_paths) if all(p.is_file() for p in recon_paths) else None
    adv_idx = [k for k, i in enumerate(ids) if (out / "records" / i / "adversarial.f32").is_file()]
    adv_sets, per_image = {}, []
    if adv_idx:
        adv = _load_stack([out / "records" / ids[k] / "adversarial.f32" for k in adv_idx])
        adv_sets[cfg.surrogate] = (adv, labels[adv_idx])
        for k in adv_idx:
            per_image.append({"id": ids[k], **json.loads((out / "results" / f"{ids[k]}.json").read_text())})
    report = build_report((images, labels), adv_sets, registry, cfg.targets, cfg.defenses, recons, per_image)
    csv_path = write_report(report, out / "report.csv", "csv")
    write_report(report, out / "report.json", "json")
    update_manifest(cfg, "evaluate", {"report.csv": _sha256_file(csv_path),
                                      "report.json": _sha256_file(out / "report.json")})
    print(report.to_csv(), end="")
    return 0


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    from PIL import Image

    from .attack import to_uint8

    backend, _ = load_backend(cfg)
    root = Path(cfg.out) / "records"
    dirs = sorted(d for d in root.iterdir() if (d / "meta.json").is_file()) if root.is_dir() else []
    if cfg.limit is not None:
        dirs = dirs[: cfg.limit]
    (Path(cfg.out) / "recon").mkdir(parents=True, exist_ok=True)
    psnrs = []
    for d in dirs:
        record = load_record(d)
        img = reconstruct(record, backend)
        Image.fromarray(to_uint8(img)).save(Path(cfg.out) / "recon" / f"{d.name}.png")
        psnrs.append(psnr_from_mse(torch.mean((img - record.source) ** 2).item()))
    mean = float(np.mean(psnrs)) if psnrs else float("nan")
    print(f"reconstructed {len(dirs)} images; mean PSNR {mean:.2f} dB")
    return 0


COMMANDS = {
    "fit-toy": cmd_fit_toy, "make-data": cmd_make_data, "invert": cmd_invert,
    "attack": cmd_attack, "evaluate": cmd_evaluate, "reconstruct": cmd_reconstruct,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file; flags override it")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--backend", help="backend name (default: toy)")
    common.add_argument("--bundle", help="toy bundle directory (default: OUT/bundle, then the shipped one)")
    common.add_argument("--surrogate", help="white-box classifier name")
    common.add_argument("--targets", help="comma-separated target classifier names")
    common.add_argument("--dataset", help="dataset .npz with images, labels, prompts")
    common.add_argument("--prompts", help="per-image prompt file, or a constant prompt string")
    common.add_argument("--limit", type=int, help="only process the first N images")
    common.add_argument("--eta", type=float)
    common.add_argument("--kappa", type=float)
    common.add_argument("--na", type=int, help="attack iterations")
    common.add_argument("--ni", type=int, help="null-embedding iterations per step")
    common.add_argument("--t", type=int, help="DDIM steps")
    common.add_argument("--w", type=float, help="guidance scale")
    common.add_argument("--beta", type=float)
    common.add_argument("--zeta", type=float)
    common.add_argument("--mu", type=float)
    common.add_argument("--rho-mode", dest="rho_mode", choices=["unit", "schedule"])
    common.add_argument("--defense", help="comma-separated defenses, e.g. jpeg:75,bitred:3 or none")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="contentattack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    fit = sub.add_parser("fit-toy", parents=[common], help="fit the toy diffusion backend and classifiers")
    fit.add_argument("--iters", type=int, help="diffusion training iterations")
    fit.add_argument("--classifier-epochs", type=int)
    data = sub.add_parser("make-data", parents=[common], help="write a procedural labeled image set")
    data.add_argument("--n", type=int, help="number of images (default 64)")
    for name, helptext in [("invert", "map images into the diffusion latent space"),
                           ("attack", "optimize adversarial latents"),
                           ("evaluate", "compute ASR rows and write report.csv/json"),
                           ("reconstruct", "write reconstructions of stored records")]:
        sub.add_parser(name, parents=[common], help=helptext)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    if not hasattr(args, "iters"):
        args.iters = None
    cfg = resolve_config(args)
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
