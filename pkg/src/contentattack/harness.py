"""Attack success rates, transfer matrices, preprocessing defenses and reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

from .errors import ParameterError, RegistrationError, UndefinedResultError

CSV_COLUMNS = ("surrogate", "target", "attack", "n_images", "asr_percent", "defense", "defense_param")


def evaluate_asr(images: torch.Tensor, labels, classifier) -> float:
    """Percentage of ``images`` whose predicted class differs from ``labels``."""
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if len(images) != len(labels):
        raise ParameterError(f"{len(images)} images but {len(labels)} labels")
    if len(labels) == 0:
        raise UndefinedResultError("attack success rate of an empty set is undefined")
    preds = torch.cat([classifier.predict(x.unsqueeze(0)).reshape(-1) for x in images])
    return 100.0 * (preds != labels).sum().item() / len(labels)


@dataclass
class TransferMatrix:
    surrogates: list[str]
    targets: list[str]
    asr: list[list[float]]
    n_images: dict[str, int]

    def is_white_box(self, surrogate: str, target: str) -> bool:
        return surrogate == target

    def average_black_box(self, surrogate: str) -> float:
        """Mean ASR over targets other than the surrogate itself."""
        row = self.asr[self.surrogates.index(surrogate)]
        vals = [v for t, v in zip(self.targets, row) if t != surrogate]
        return float(np.mean(vals)) if vals else float("nan")


def transfer_matrix(adv_sets: dict[str, tuple[torch.Tensor, torch.Tensor]], targets,
                    registry) -> TransferMatrix:
    """``adv_sets`` maps surrogate name to ``(images, labels)``; ``targets`` are registry names."""
    targets = list(targets)
    models = {}
    for t in targets:
        if t not in registry.classifiers:
            raise RegistrationError(f"unknown target classifier {t!r}")
        models[t] = registry.classifiers[t]
    rows = []
    for s, (images, labels) in adv_sets.items():
        rows.append([evaluate_asr(images, labels, models[t]) for t in targets])
    return TransferMatrix(list(adv_sets), targets, rows, {s: len(v[1]) for s, v in adv_sets.items()})


def _to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().numpy()
    return np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def jpeg_defense(image: torch.Tensor, quality: int = 75) -> torch.Tensor:
    """JPEG encode/decode round trip of a ``(C, H, W)`` image in [0, 1]."""
    if not 1 <= int(quality) <= 100 or int(quality) != quality:
        raise ParameterError(f"JPEG quality must be an integer in [1, 100], got {quality}")
    buf = io.BytesIO()
    Image.fromarray(_to_uint8(image)).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    out = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(out.transpose(2, 0, 1).copy())


def bit_depth_reduce(image: torch.Tensor, bits: int = 3) -> torch.Tensor:
    """Quantize each channel to ``2**bits`` bins, reconstructing at bin midpoints."""
    if not 1 <= int(bits) <= 8 or int(bits) != bits:
        raise ParameterError(f"bits must be an integer in [1, 8], got {bits}")
    levels = 2 ** int(bits)
    idx = torch.clamp(torch.floor(image * levels), 0, levels - 1)
    return (idx + 0.5) / levels


DEFENSES: dict[str, tuple[Callable, int]] = {
    "jpeg": (jpeg_defense, 75),
    "bitred": (bit_depth_reduce, 3),
}


def parse_defense(spec: str) -> tuple[str, int]:
    """``"jpeg"`` or ``"jpeg:50"`` to ``(name, param)``."""
    name, _, param = spec.partition(":")
    name = name.strip().lower()
    if name not in DEFENSES:
        raise ParameterError(f"unknown defense {name!r}; available: {sorted(DEFENSES)}")
    return name, int(param) if param else DEFENSES[name][1]


def apply_defense(images: torch.Tensor, name: str, param: int) -> torch.Tensor:
    fn = DEFENSES[name][0]
    return torch.stack([fn(x, param) for x in images])


@dataclass
class EvalReport:
    rows: list[dict]
    per_image: list[dict] = field(default_factory=list)

    def asr(self, **match) -> float:
        hits = [r for r in self.rows if all(r[k] == v for k, v in match.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {match}")
        return hits[0]["asr_percent"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({**r, "asr_percent": f"{r['asr_percent']:.4f}"})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"columns": list(CSV_COLUMNS), "rows": self.rows,
                           "per_image": self.per_image}, indent=2, sort_keys=True)


def _row(surrogate, target, attack, n, asr, defense="", param=""):
    return {"surrogate": surrogate, "target": target, "attack": attack, "n_images": int(n),
            "asr_percent": round(float(asr), 4), "defense": defense, "defense_param": str(param)}


def build_report(clean: tuple[torch.Tensor, torch.Tensor], adv_sets: dict, registry, targets=None,
                 defenses=(), reconstructions: torch.Tensor | None = None,
                 per_image: list[dict] | None = None) -> EvalReport:
    """Assemble report rows.

    Row order: clean baseline per target, ILM reconstructions per target (when
    given), then per surrogate the undefended ACA rows followed by one row per
    (defense, target). Defended rows re-evaluate the fixed adversarial images.
    """
    images, labels = clean
    targets = list(targets) if targets is not None else registry.classifier_names()
    rows = []
    for t in targets:
        rows.append(_row("-", t, "clean", len(labels), evaluate_asr(images, labels, registry.classifier(t))))
    if reconstructions is not None:
        for t in targets:
            rows.append(_row("-", t, "ilm", len(labels),
                             evaluate_asr(reconstructions, labels, registry.classifier(t))))
    parsed = [parse_defense(d) if isinstance(d, str) else tuple(d) for d in defenses]
    for s, (adv, adv_labels) in adv_sets.items():
        for t in targets:
            rows.append(_row(s, t, "aca", len(adv_labels),
                             evaluate_asr(adv, adv_labels, registry.classifier(t))))
        for name, param in parsed:
            defended = apply_defense(adv, name, param)
            for t in targets:
                rows.append(_row(s, t, "aca", len(adv_labels),
                                 evaluate_asr(defended, adv_labels, registry.classifier(t)), name, param))
    return EvalReport(rows, per_image or [])


def write_report(report: EvalReport, path, fmt: str = "csv") -> Path:
    path = Path(path)
    if fmt not in ("csv", "json"):
        raise ParameterError(f"unknown report format {fmt!r}")
    text = report.to_csv() if fmt == "csv" else report.to_json()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def read_report(path) -> EvalReport:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read report {path}: {exc}") from exc
    if path.suffix == ".json":
        data = json.loads(text)
        return EvalReport(data["rows"], data.get("per_image", []))
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append(_row(r["surrogate"], r["target"], r["attack"], int(r["n_images"]),
                         float(r["asr_percent"]), r["defense"], r["defense_param"]))
    return EvalReport(rows)
