"""Deterministic synthetic cohorts for desk-scale runs.

The generator plants, per case, the posterior the base scorer will report,
the correctness of the system's final label (rolled from the reliability
band the posterior falls in), and aligned behaviors for every verification
tool. Whatever path the router actually takes, each tool points at the same
planted final label, so the full-coverage accuracy of a run over the cohort
equals the planted correctness fraction exactly.

Outputs under the target folder: cases/ and reference/ image files, a
labels.csv truth table keyed by case id, and stubs.json replayed by the
stub adapters.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from cxrtriage import STUB_SCRIPT_VERSION, imaging
from cxrtriage.tools import format_vlm_line

# (p_lo, p_hi, correctness probability); ranges tile [0, 1] of the posterior.
DEFAULT_BANDS = (
    (0.0, 0.1, 0.98),
    (0.1, 0.4, 0.85),
    (0.4, 0.6, 0.70),
    (0.6, 0.9, 0.85),
    (0.9, 1.0, 0.98),
)

TAU_CONF = 0.60  # mirrors the default accept threshold for route planning


@dataclass
class SyntheticCohortSpec:
    n_cases: int = 200
    n_reference: int = 100
    ood_fraction: float = 0.10
    seed: int = 0
    tta_k: int = 8
    image_size: int = 1024
    bands: tuple = DEFAULT_BANDS

    def __post_init__(self):
        if self.n_cases < 1 or self.n_reference < 2:
            raise ValueError("need at least 1 case and 2 reference images")
        if not 0.0 <= self.ood_fraction <= 1.0:
            raise ValueError(f"ood_fraction must be in [0, 1], got {self.ood_fraction}")
        bands = sorted(self.bands)
        if bands[0][0] != 0.0 or bands[-1][1] != 1.0:
            raise ValueError("reliability bands must cover [0, 1]")
        for (_, hi, pc), (lo2, _, _) in zip(bands, bands[1:]):
            if hi != lo2:
                raise ValueError("reliability bands must tile [0, 1] without gaps")
        for lo, hi, pc in bands:
            if not (0.0 <= pc <= 1.0 and lo < hi):
                raise ValueError(f"bad band ({lo}, {hi}, {pc})")


def _smooth_noise(rng, size: int) -> np.ndarray:
    import cv2

    coarse = rng.normal(0.45, 0.08, (64, 64))
    return cv2.resize(coarse, (size, size), interpolation=cv2.INTER_LINEAR)


def _synth_image(rng, size: int, blob: bool, ood: bool) -> np.ndarray:
    """One synthetic frame: banded noise, bright blob for positives,
    a high-contrast block pattern for the shifted (OOD) population."""
    if ood:
        tiles = rng.choice([0.25, 0.9], size=(size // 16 + 1, size // 16 + 1))
        img = np.kron(tiles, np.ones((16, 16)))[:size, :size]
        img = img + rng.normal(0.0, 0.05, (size, size))
    else:
        img = _smooth_noise(rng, size)
        if blob:
            cy, cx = rng.uniform(0.3, 0.7, 2) * size
            yy, xx = np.ogrid[:size, :size]
            bump = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (0.12 * size) ** 2)))
            img = img + 0.25 * bump
    return imaging.to_uint8(img)


def _band_for(p: float, bands) -> tuple:
    for lo, hi, pc in bands:
        if lo <= p < hi:
            return (lo, hi, pc)
    return bands[-1]


def _stable_tta(final_label: str, k: int) -> list:
    center = 0.92 if final_label == "positive" else 0.08
    delta = 0.004
    return [round(center + (delta if i % 2 == 0 else -delta), 6) for i in range(k)]


def _unstable_tta(k: int) -> list:
    return [0.8 if i % 2 == 0 else 0.2 for i in range(k)]


@dataclass
class CohortManifest:
    n_cases: int
    n_reference: int
    n_ood: int
    planted_correct: int
    labels_path: str
    stubs_path: str
    cases_dir: str
    reference_dir: str

    @property
    def planted_accuracy(self) -> float:
        return self.planted_correct / self.n_cases


def generate_cohort(spec: SyntheticCohortSpec, out_dir) -> CohortManifest:
    """Write the cohort; same spec gives byte-identical outputs."""
    rng = np.random.default_rng(spec.seed)
    cases_dir = os.path.join(out_dir, "cases")
    reference_dir = os.path.join(out_dir, "reference")
    os.makedirs(cases_dir, exist_ok=True)
    os.makedirs(reference_dir, exist_ok=True)

    for i in range(spec.n_reference):
        blob = bool(rng.random() < 0.5)
        img = _synth_image(rng, spec.image_size, blob=blob, ood=False)
        with open(os.path.join(reference_dir, f"ref_{i:04d}.png"), "wb") as fh:
            fh.write(imaging.encode_png(img))

    labels_rows = []
    stub_cases = {}
    n_ood = 0
    planted_correct = 0
    # The shifted-distribution count is exact, not a per-case coin flip.
    n_ood_target = int(round(spec.n_cases * spec.ood_fraction))
    ood_indices = set(
        rng.choice(spec.n_cases, size=n_ood_target, replace=False).tolist()
    )
    for i in range(spec.n_cases):
        ood = i in ood_indices
        p = float(rng.uniform(0.0, 1.0))
        _, _, p_correct = _band_for(p, spec.bands)
        correct = bool(rng.random() < p_correct)

        final_label = "positive" if p >= 0.5 else "negative"
        truth = final_label if correct else ("negative" if final_label == "positive" else "positive")

        confident = max(p, 1.0 - p) >= TAU_CONF
        if confident and not ood:
            route = "direct"
        else:
            roll = rng.random()
            route = "tta" if roll < 0.5 else ("moe" if roll < 0.8 else "vlm")

        img = _synth_image(rng, spec.image_size, blob=(truth == "positive"), ood=ood)
        data = imaging.encode_png(img)
        case_id = hashlib.sha256(data).hexdigest()[:16]
        filename = f"case_{i:04d}.png"
        with open(os.path.join(cases_dir, filename), "wb") as fh:
            fh.write(data)

        if route in ("direct", "tta"):
            tta = _stable_tta(final_label, spec.tta_k)
        else:
            tta = _unstable_tta(spec.tta_k)
        if route == "vlm":
            moe = [0.9, 0.9, 0.1, 0.1]  # exact split: agreement 1/2, no accept
        else:
            vote = 0.9 if final_label == "positive" else 0.1
            moe = [vote, vote, vote, vote]
        vlm_conf = 0.85 if final_label == "positive" else 0.15
        phrase = (
            "synthetic interstitial haze pattern"
            if final_label == "positive"
            else "synthetic clear lung fields"
        )
        cam = None
        if final_label == "positive":
            heat = np.zeros((8, 8))
            hy, hx = rng.integers(2, 6, 2)
            heat[hy, hx] = 1.0
            heat[max(hy - 1, 0), hx] = 0.6
            cam = np.round(heat, 4).tolist()

        n_ood += int(ood)
        planted_correct += int(correct)
        labels_rows.append((case_id, truth, filename))
        stub_cases[case_id] = {
            "digest": imaging.pixel_fingerprint(imaging.to_unit(img)),
            "p": round(p, 6),
            "tta": tta,
            "moe": moe,
            "vlm": format_vlm_line(final_label, vlm_conf, phrase),
            "cam": cam,
            "planted": {
                "route": route,
                "correct": correct,
                "final_label": final_label,
                "ood": ood,
            },
        }

    labels_path = os.path.join(out_dir, "labels.csv")
    with open(labels_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "label", "file"])
        writer.writerows(labels_rows)

    stubs_path = os.path.join(out_dir, "stubs.json")
    payload = {
        "schema_version": STUB_SCRIPT_VERSION,
        "seed": spec.seed,
        "tta_k": spec.tta_k,
        "cases": stub_cases,
    }
    with open(stubs_path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")

    return CohortManifest(
        n_cases=spec.n_cases,
        n_reference=spec.n_reference,
        n_ood=n_ood,
        planted_correct=planted_correct,
        labels_path=labels_path,
        stubs_path=stubs_path,
        cases_dir=cases_dir,
        reference_dir=reference_dir,
    )


def load_stub_script(path) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("schema_version") != STUB_SCRIPT_VERSION:
        raise ValueError(f"unsupported stub script version in {path}")
    return payload
