"""Post-accept opacity quantification and visualization.

For accepted positive cases the lung field is isolated, rib and support
device structures are suppressed, and the lung-whiteness index (LWI) is the
mean suppressed intensity over the lung mask:

    LWI = (1 / |M_lung|) * sum over M_lung of S_dev(S_rib(I))

Rib suppression fills each connected masked component with the median of its
annulus: the component dilated by a radius-3 disk, minus all masked pixels.
Device suppression prefers a dedicated inpainting adapter and falls back to
the same annulus-median fill, counting each fallback fill. Suppression never
touches pixels outside the target mask and never alters any decision label.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage

from cxrtriage import imaging
from cxrtriage.tools import ToolError

log = logging.getLogger(__name__)

_EIGHT_CONN = np.ones((3, 3), dtype=bool)


def _disk(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return (yy * yy + xx * xx) <= radius * radius


_DISK3 = _disk(3)

MASK_TARGETS = ("lung", "rib", "device")


@dataclass
class MaskSet:
    lung: np.ndarray = None
    rib: np.ndarray = None
    device: np.ndarray = None
    notes: list = field(default_factory=list)


def fetch_masks(case_id: str, pixels: np.ndarray, seg_adapter) -> MaskSet:
    """Ask the segmentation adapter for each target mask.

    The lung mask is required downstream; when it cannot be produced the
    note ``lung_seg_unavailable`` is recorded and quantification is skipped.
    Missing rib or device masks default to all-background.
    """
    masks = MaskSet()
    zeros = np.zeros(pixels.shape, dtype=bool)
    for target in MASK_TARGETS:
        mask = None
        if seg_adapter is not None:
            try:
                mask = seg_adapter.segment(case_id, pixels, target)
            except ToolError as exc:
                log.warning("%s segmentation failed for %s: %s", target, case_id, exc)
        if mask is not None and np.asarray(mask).shape != pixels.shape:
            log.warning(
                "%s mask has shape %s, expected %s; ignoring",
                target,
                np.asarray(mask).shape,
                pixels.shape,
            )
            mask = None
        if mask is None:
            if target == "lung":
                masks.notes.append("lung_seg_unavailable")
            else:
                setattr(masks, target, zeros)
        else:
            setattr(masks, target, np.asarray(mask, dtype=bool))
    return masks


def _annulus_median_fill(
    image: np.ndarray, mask: np.ndarray, fallback_mask: np.ndarray
) -> tuple:
    """Fill each connected component of ``mask`` with its annulus median.

    Returns (filled image, number of components filled). The annulus is the
    component dilated by a radius-3 disk, restricted to pixels outside the
    whole mask, so fill values are read from territory the fill never writes;
    applying the fill twice is therefore a no-op.
    """
    out = image.copy()
    if not mask.any():
        return out, 0
    labels, count = ndimage.label(mask, structure=_EIGHT_CONN)
    unmasked = ~mask
    global_fallback = None
    for idx in range(1, count + 1):
        component = labels == idx
        annulus = ndimage.binary_dilation(component, structure=_DISK3) & unmasked
        values = image[annulus]
        if values.size:
            fill = float(np.median(values))
        else:
            if global_fallback is None:
                pool = image[fallback_mask & unmasked]
                if pool.size == 0:
                    pool = image[unmasked]
                global_fallback = float(np.median(pool))
            fill = global_fallback
        out[component] = fill
    return out, count


def suppress_ribs(
    image: np.ndarray, rib_mask: np.ndarray, fallback_mask: np.ndarray = None
) -> np.ndarray:
    """Replace rib structures with locally plausible background intensity.

    A component whose annulus is empty falls back to the median over
    ``fallback_mask`` (the lung field when available) excluding rib pixels.
    A rib mask covering the whole image leaves nothing to read from and is
    rejected as degenerate.
    """
    rib_mask = np.asarray(rib_mask, dtype=bool)
    if rib_mask.shape != image.shape:
        raise ValueError(f"rib mask shape {rib_mask.shape} != image shape {image.shape}")
    if rib_mask.all():
        raise ValueError("degenerate mask: rib mask covers the whole image")
    if fallback_mask is None:
        fallback_mask = np.ones(image.shape, dtype=bool)
    filled, _ = _annulus_median_fill(image, rib_mask, np.asarray(fallback_mask, dtype=bool))
    return filled


def suppress_devices(
    image: np.ndarray,
    device_mask: np.ndarray,
    inpaint_adapter=None,
    fallback_mask: np.ndarray = None,
) -> tuple:
    """Remove support devices; returns (image, fallback fill count, notes).

    With an inpainting adapter the masked region is replaced by the adapter's
    output clamped to [0, 1]. Adapter failure or wrong-shaped output falls
    back to annulus-median filling, one counted event per filled component.
    """
    device_mask = np.asarray(device_mask, dtype=bool)
    if device_mask.shape != image.shape:
        raise ValueError(
            f"device mask shape {device_mask.shape} != image shape {image.shape}"
        )
    if device_mask.all():
        raise ValueError("degenerate mask: device mask covers the whole image")
    if not device_mask.any():
        return image.copy(), 0, []

    notes = []
    if inpaint_adapter is not None:
        try:
            painted = np.asarray(inpaint_adapter.inpaint(image, device_mask), dtype=np.float64)
            if painted.shape != image.shape:
                raise ToolError(f"inpainted shape {painted.shape} != {image.shape}")
            out = image.copy()
            out[device_mask] = np.clip(painted[device_mask], 0.0, 1.0)
            return out, 0, notes
        except ToolError as exc:
            log.warning("inpainting failed, using median fill: %s", exc)
            notes.append("inpaint_fallback")

    if fallback_mask is None:
        fallback_mask = np.ones(image.shape, dtype=bool)
    filled, count = _annulus_median_fill(
        image, device_mask, np.asarray(fallback_mask, dtype=bool)
    )
    return filled, count, notes


def compute_lwi(image: np.ndarray, lung_mask: np.ndarray) -> float:
    """Mean intensity over the lung mask; an empty mask has no mean."""
    lung_mask = np.asarray(lung_mask, dtype=bool)
    if lung_mask.shape != image.shape:
        raise ValueError(f"lung mask shape {lung_mask.shape} != image shape {image.shape}")
    if not lung_mask.any():
        raise ValueError("empty lung mask")
    return float(np.mean(image[lung_mask], dtype=np.float64))


@dataclass
class LwiReport:
    lwi: float
    lung_pixels: int
    lambda_fill_events: int
    suppression_chain: list
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "lwi": self.lwi,
            "lung_pixels": self.lung_pixels,
            "lambda_fill_events": self.lambda_fill_events,
            "suppression_chain": list(self.suppression_chain),
        }


def quantify_opacity(
    case_id: str,
    pixels: np.ndarray,
    seg_adapter=None,
    inpaint_adapter=None,
) -> tuple:
    """Full post-accept chain: masks, rib then device suppression, LWI.

    Returns (LwiReport or None, suppressed image or None, notes). Without a
    lung mask nothing is computed and the notes say why. When neither mask
    marks any pixel the input array itself comes back (no copy): nothing
    changed, so callers can tell a no-op by identity.
    """
    masks = fetch_masks(case_id, pixels, seg_adapter)
    notes = list(masks.notes)
    if masks.lung is None:
        return None, None, notes
    if not masks.rib.any() and not masks.device.any():
        suppressed, fill_events = pixels, 0
    else:
        suppressed = suppress_ribs(pixels, masks.rib, fallback_mask=masks.lung)
        suppressed, fill_events, dev_notes = suppress_devices(
            suppressed, masks.device, inpaint_adapter=inpaint_adapter, fallback_mask=masks.lung
        )
        notes.extend(dev_notes)
    report = LwiReport(
        lwi=compute_lwi(suppressed, masks.lung),
        lung_pixels=int(masks.lung.sum()),
        lambda_fill_events=fill_events,
        suppression_chain=["rib_suppression", "device_suppression"],
        notes=notes,
    )
    return report, suppressed, notes


@dataclass
class CamArtifact:
    heatmap: np.ndarray  # (H, W) display-resolution map in [0, 1]
    native_u8: np.ndarray  # model-resolution map on the 8-bit scale
    overlay: np.ndarray  # (H, W, 3) BGR uint8


def build_cam_artifact(pixels: np.ndarray, heatmap: np.ndarray) -> CamArtifact:
    """Upsample a class-activation map and blend it over the radiograph.

    The raw map is bilinearly resized to the input resolution and min-max
    normalized (a constant map normalizes to zeros). The overlay blends
    0.6 * grayscale + 0.4 * colormapped heat in 8-bit space. The stored
    heatmap stays at the model's native resolution (normalized the same
    way): the upsampling is cosmetic and reproducible, so persisting a
    megapixel copy of it would only burn write bandwidth.
    """
    heatmap = np.asarray(heatmap, dtype=np.float32)
    if heatmap.ndim != 2:
        raise ValueError(f"heatmap must be 2D, got shape {heatmap.shape}")
    h, w = pixels.shape
    nlo, nhi = float(heatmap.min()), float(heatmap.max())
    if nhi == nlo:
        native = np.zeros(heatmap.shape, dtype=np.uint8)
    else:
        native = np.rint((heatmap - nlo) * (255.0 / (nhi - nlo))).astype(np.uint8)
    up = cv2.resize(heatmap, (w, h), interpolation=cv2.INTER_LINEAR)
    lo, hi = float(up.min()), float(up.max())
    if hi == lo:
        norm = np.zeros_like(up)
        quant = np.zeros((h, w), dtype=np.uint8)
    else:
        norm = (up - lo) / np.float32(hi - lo)
        scaled = norm * np.float32(255.0)
        np.rint(scaled, out=scaled)
        quant = scaled.astype(np.uint8)
    colored = cv2.applyColorMap(quant, cv2.COLORMAP_JET)
    gray = cv2.cvtColor(imaging.to_uint8(pixels), cv2.COLOR_GRAY2BGR)
    overlay = cv2.addWeighted(gray, 0.6, colored, 0.4, 0.0)
    return CamArtifact(heatmap=norm, native_u8=native, overlay=overlay)


# ---------------------------------------------------------------------------
# bundled adapters


class StaticMaskAdapter:
    """Segmentation test double returning preset masks per target."""

    def __init__(self, masks: dict, name: str = "static-seg", version: str = "static-seg-1"):
        self.masks = masks
        self.name = name
        self.version = version

    def segment(self, case_id: str, pixels: np.ndarray, target: str):
        if target not in MASK_TARGETS:
            raise ToolError(f"unknown segmentation target {target!r}")
        value = self.masks.get(target)
        if callable(value):
            value = value(case_id, pixels)
        if isinstance(value, Exception):
            raise ToolError(str(value))
        return value


class EllipseLungAdapter:
    """Deterministic two-ellipse lung field, used for synthetic desk runs."""

    name = "ellipse-lung"
    version = "ellipse-lung-1"

    def __init__(self):
        self._cache = {}  # shape -> mask; masks depend on shape alone

    def segment(self, case_id: str, pixels: np.ndarray, target: str):
        if target != "lung":
            return None
        h, w = pixels.shape
        cached = self._cache.get((h, w))
        if cached is not None:
            return cached
        yy, xx = np.ogrid[:h, :w]

        def ellipse(cx, cy, ax, ay):
            return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0

        left = ellipse(0.33 * w, 0.52 * h, 0.16 * w, 0.30 * h)
        right = ellipse(0.67 * w, 0.52 * h, 0.16 * w, 0.30 * h)
        mask = left | right
        self._cache[(h, w)] = mask
        return mask
