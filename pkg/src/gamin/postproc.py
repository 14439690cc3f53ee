"""Signal pipeline turning noisy generator outputs into one reconstruction.

Stages: sample a large batch from the generator, keep only frequency bins
shared across (at least) a threshold fraction of the batch in the 2D FFT
domain, then blur, edge-filter and take the pixel-wise median. Color
channels are processed independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import nn
from .data import denormalize_to_bytes

EDGE_KINDS = ("laplacian", "sobel", "none")

LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float32)
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
SOBEL_Y = SOBEL_X.T.copy()


@dataclass
class ReconstructionConfig:
    samples: int = 1000
    presence_threshold: float = 0.90
    presence_percentile: float = 50.0  # per-sample magnitude cut for "appears"
    blur_sigma: float = 1.0
    blur_kernel: int = 5
    edge: str = "laplacian"
    per_channel: bool = True
    normalize_output: bool = True
    seed: int = 0
    image_shape: tuple = (1, 28, 28)
    chunk: int = 250

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("samples must be >= 2")
        if not 0.0 <= self.presence_threshold <= 1.0:
            raise ValueError("presence_threshold must lie in [0, 1]")
        if self.edge not in EDGE_KINDS:
            raise ValueError(f"edge must be one of {EDGE_KINDS}")
        if self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be odd")


def generate_batch(generator: nn.Model, n, seed, image_shape):
    """n generator samples from fresh standard-normal latents (inference
    mode), reshaped to (n, c, h, w)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    c, h, w = image_shape
    if c * h * w != generator.spec.output_dim:
        raise ValueError(f"image shape {image_shape} does not match generator "
                         f"output {generator.spec.output_dim}")
    rng = np.random.default_rng(seed)
    out = np.empty((n, c, h, w), dtype=np.float32)
    latent = generator.spec.input_dim
    for i in range(0, n, 256):
        m = min(256, n - i)
        z = rng.standard_normal((m, latent)).astype(np.float32)
        out[i:i + m] = generator.forward(z, "infer").reshape(m, c, h, w)
    return out


def common_frequency_filter(batch, cfg: ReconstructionConfig):
    """Zero out, in every sample, the frequency bins that 'appear' in fewer
    than presence_threshold of the samples.

    A bin appears in a sample when its FFT magnitude strictly exceeds that
    sample's presence_percentile magnitude over all bins. One mask per
    channel, shared across the batch.
    """
    n, c, h, w = batch.shape
    out = np.empty_like(batch)
    for ch in range(c):
        spectra = np.fft.fft2(batch[:, ch, :, :])
        mags = np.abs(spectra)
        cuts = np.percentile(mags.reshape(n, -1), cfg.presence_percentile, axis=1)
        present = mags > cuts[:, None, None]
        votes = present.mean(axis=0)
        mask = votes >= cfg.presence_threshold
        spectra *= mask
        out[:, ch, :, :] = np.fft.ifft2(spectra).real
    return out


def _reflect_pad_2d(x, pad):
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")


def _correlate_rows(x, kern1d):
    """Correlate along the last axis with a centered 1D kernel (input is
    already padded)."""
    k = len(kern1d)
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1)
    return win @ kern1d


def gaussian_blur(batch3, sigma, kernel):
    """Separable Gaussian blur with reflect padding on (n, h, w)."""
    if sigma <= 0 or kernel <= 1:
        return batch3
    half = kernel // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (t / sigma) ** 2)
    kern = (kern / kern.sum()).astype(batch3.dtype)
    x = _reflect_pad_2d(batch3, half)
    x = _correlate_rows(x, kern)                      # blur columns-direction
    x = _correlate_rows(x.transpose(0, 2, 1), kern)   # blur rows-direction
    return np.ascontiguousarray(x.transpose(0, 2, 1))


def _correlate2d(batch3, kern):
    k = kern.shape[0]
    half = k // 2
    x = _reflect_pad_2d(batch3, half)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    return np.einsum("nhwij,ij->nhw", win, kern.astype(batch3.dtype))


def edge_filter(batch3, kind):
    """Edge magnitude per sample: |Laplacian| or Sobel gradient magnitude."""
    if kind == "none":
        return batch3
    if kind == "laplacian":
        return np.abs(_correlate2d(batch3, LAPLACIAN))
    if kind == "sobel":
        gx = _correlate2d(batch3, SOBEL_X)
        gy = _correlate2d(batch3, SOBEL_Y)
        return np.sqrt(gx * gx + gy * gy)
    raise ValueError(f"edge must be one of {EDGE_KINDS}")


def lower_median(values, axis=0):
    """Median taking the lower of the two middle values for even counts."""
    n = values.shape[axis]
    k = (n - 1) // 2
    return np.take(np.partition(values, k, axis=axis), k, axis=axis)


def reconstruct(filtered, cfg: ReconstructionConfig):
    """Blur + edge-filter each sample, then pixel-wise (lower) median."""
    n, c, h, w = filtered.shape
    if n < 1:
        raise ValueError("batch must be nonempty")
    out = np.empty((c, h, w), dtype=filtered.dtype)
    for ch in range(c):
        stack = gaussian_blur(filtered[:, ch, :, :], cfg.blur_sigma, cfg.blur_kernel)
        stack = edge_filter(stack, cfg.edge)
        out[ch] = lower_median(stack, axis=0)
    return out


def normalize_display(image):
    """Affine rescale to span [-1, 1] (constant images map to zeros)."""
    lo, hi = float(image.min()), float(image.max())
    if hi - lo < 1e-12:
        return np.zeros_like(image)
    return (2.0 * (image - lo) / (hi - lo) - 1.0).astype(image.dtype)


def postprocess(generator: nn.Model, cfg: ReconstructionConfig):
    """Full pipeline: generate -> common-frequency filter -> reconstruct."""
    batch = generate_batch(generator, cfg.samples, cfg.seed, cfg.image_shape)
    filtered = common_frequency_filter(batch, cfg)
    image = reconstruct(filtered, cfg)
    if cfg.normalize_output:
        image = normalize_display(image)
    return image


def save_png(image, path):
    """Write a (c, h, w) image in [-1, 1] as an 8-bit PNG."""
    arr = denormalize_to_bytes(np.clip(image, -1.0, 1.0))
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path, format="PNG")
    elif arr.shape[0] == 3:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
    else:
        raise ValueError(f"cannot encode {arr.shape[0]}-channel image as PNG")


def load_png(path):
    """Read a PNG back into a (c, h, w) array in [-1, 1]."""
    img = Image.open(path)
    img.load()
    arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)[:3]
    return (arr.astype(np.float32) / 127.5) - 1.0
