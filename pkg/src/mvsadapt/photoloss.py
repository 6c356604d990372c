# Module containing the self-supervised photometric consistency loss

import logging
from dataclasses import dataclass

import numpy as np

from mvsadapt import autodiff as ad
from mvsadapt.geometry import inverse_warp
from mvsadapt.mvsnet import forward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhotoLossConfig:
    """
    Settings of the photometric consistency loss.

    Parameters
    ----------
    huber_delta : float
        Huber threshold on [0, 1] intensities.
    top_k : int
        Number of lowest-error source views kept per pixel.
    ssim_window : int
        Odd width of the uniform SSIM window.
    ssim_c1, ssim_c2 : float
        SSIM stabilisers.
    ssim_weight : float
        Weight of the SSIM term relative to the reprojection term.
    """
    huber_delta: float = 0.1
    top_k: int = 2
    ssim_window: int = 7
    ssim_c1: float = 1e-4
    ssim_c2: float = 9e-4
    ssim_weight: float = 1.0

    def __post_init__(self):
        if self.huber_delta <= 0:
            raise ValueError(f"'huber_delta' must be positive, got {self.huber_delta}.")
        if self.top_k < 1:
            raise ValueError(f"'top_k' must be at least 1, got {self.top_k}.")
        if self.ssim_window < 1 or self.ssim_window % 2 != 1:
            raise ValueError(f"'ssim_window' must be a positive odd integer, got {self.ssim_window}.")
        if self.ssim_c1 <= 0 or self.ssim_c2 <= 0:
            raise ValueError("'ssim_c1' and 'ssim_c2' must be positive.")
        if self.ssim_weight < 0:
            raise ValueError(f"'ssim_weight' must be nonnegative, got {self.ssim_weight}.")


def huber(x, delta):
    """
    Huber penalty of a number, an array or a Var.
    """
    if isinstance(x, ad.Var):
        return ad.huber(x, delta)
    if delta <= 0:
        raise ValueError(f"'delta' must be positive, got {delta}.")
    x = np.asarray(x, dtype=np.float64)
    magnitude = np.abs(x)
    out = np.where(magnitude <= delta, 0.5 * x * x, delta * (magnitude - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def _shift_index(shape, axis):
    positions = np.arange(int(np.prod(shape))).reshape(shape)
    shifted = np.roll(positions, -1, axis=axis)
    last = [slice(None)] * len(shape)
    last[axis] = -1
    shifted[tuple(last)] = -1
    return shifted


def image_gradient(img):
    """
    Forward differences along x (columns) and y (rows), zero on the last
    column and row respectively.

    Parameters
    ----------
    img : np.ndarray or Var
        (H, W, C) image, H and W at least 2.

    Returns
    -------
    tuple of Var
        (grad_x, grad_y), each (H, W, C).
    """
    img = ad.as_var(img)
    if img.ndim != 3 or img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError(f"'img' must be (H, W, C) with H, W >= 2, got shape {img.shape}.")
    grads = []
    for axis in (1, 0):
        edge = np.ones(img.shape)
        last = [slice(None)] * 3
        last[axis] = -1
        edge[tuple(last)] = 0.0
        grads.append(ad.mul(ad.sub(ad.gather(img, _shift_index(img.shape, axis)), img), edge))
    return grads[0], grads[1]


def _pair_mask(mask, axis):
    """
    1 where a pixel and its next neighbour along ``axis`` are both visible.
    """
    out = np.zeros_like(mask)
    if axis == 1:
        out[:, :-1] = mask[:, :-1] * mask[:, 1:]
    else:
        out[:-1, :] = mask[:-1, :] * mask[1:, :]
    return out


def reproj_error_per_view(ref, warped, mask, cfg):
    """
    Per-pixel reprojection error of one warped source view.

    The pixel term is the Huber penalty of the masked channel differences
    summed over channels; the gradient term is the L1 difference of the
    x and y image gradients, kept where both pixels of the difference are
    visible.

    Returns
    -------
    Var
        (H, W) error map, zero outside ``mask``.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if warped.shape != np.shape(ref) or mask.shape != warped.shape[:2]:
        raise ValueError(f'Shapes differ: ref {np.shape(ref)}, warped {warped.shape}, mask {mask.shape}.')
    channel_mask = mask[:, :, None]
    diff = ad.mul(ad.sub(warped, ref), channel_mask)
    pixel = ad.sum_(huber(diff, cfg.huber_delta), axis=2)
    ref_gx, ref_gy = image_gradient(ref)
    warped_gx, warped_gy = image_gradient(warped)
    grad_x = ad.mul(ad.abs_(ad.sub(warped_gx, ref_gx)), _pair_mask(mask, 1)[:, :, None])
    grad_y = ad.mul(ad.abs_(ad.sub(warped_gy, ref_gy)), _pair_mask(mask, 0)[:, :, None])
    grad = ad.sum_(ad.add(grad_x, grad_y), axis=2)
    return ad.mul(ad.add(pixel, grad), mask)


def topk_selection(values, masks, k):
    """
    Boolean (H, W, M) selection of the ``k`` smallest visible values per
    pixel, ties resolved towards the lower view index.
    """
    visible = np.stack([np.asarray(m) > 0 for m in masks], axis=-1)
    keys = np.where(visible, values, np.inf)
    order = np.argsort(keys, axis=-1, kind='stable')
    selected = np.zeros(keys.shape, dtype=bool)
    np.put_along_axis(selected, order[..., :k], True, axis=-1)
    return selected & visible


def topk_reproj(maps, masks, k):
    """
    Sum over pixels of the ``k`` lowest visible per-view errors, divided by
    the pixel count. Pixels with fewer than ``k`` visible views sum all of
    them; invisible pixels contribute zero.

    Parameters
    ----------
    maps : list of Var
        M per-view (H, W) error maps.
    masks : list of np.ndarray
        M visibility masks.
    k : int
        1 <= k <= M.

    Returns
    -------
    Var
        Scalar loss.
    """
    if not 1 <= k <= len(maps):
        raise ValueError(f"'k' must lie in [1, {len(maps)}], got {k}.")
    stacked = ad.stack(maps, axis=-1)
    selected = topk_selection(stacked.value, masks, k)
    height, width = stacked.shape[:2]
    return ad.div(ad.sum_(ad.mul(stacked, selected.astype(np.float64))), float(height * width))


def _masked_ssim_map(ref, warped, mask, cfg):
    k = cfg.ssim_window
    weight = mask[:, :, None]
    count = ad.box_sum(np.repeat(weight, ref.shape[2], axis=2), k).value
    count_safe = np.where(count > 0, count, 1.0)

    def window_mean(x):
        return ad.div(ad.box_sum(ad.mul(x, weight), k), count_safe)

    mu_x = window_mean(ref)
    mu_y = window_mean(warped)
    var_x = ad.sub(window_mean(ref * ref), ad.square(mu_x))
    var_y = ad.sub(window_mean(ad.square(warped)), ad.square(mu_y))
    cov = ad.sub(window_mean(ad.mul(warped, ref)), ad.mul(mu_x, mu_y))
    numerator = ad.mul(ad.add(ad.mul(ad.mul(mu_x, mu_y), 2.0), cfg.ssim_c1),
                       ad.add(ad.mul(cov, 2.0), cfg.ssim_c2))
    denominator = ad.mul(ad.add(ad.add(ad.square(mu_x), ad.square(mu_y)), cfg.ssim_c1),
                         ad.add(ad.add(var_x, var_y), cfg.ssim_c2))
    return ad.div(numerator, denominator)


def ssim_loss(ref, warped, masks, cfg):
    """
    Mean over views and visible pixels of clip((1 - SSIM) / 2, 0, 1).

    Window statistics use only visible pixels (window weights renormalised
    by the visible count); the per-pixel value averages the channels.
    Returns zero when no pixel is visible in any view.
    """
    ref = np.asarray(ref, dtype=np.float64)
    if cfg.ssim_window > min(ref.shape[:2]):
        raise ValueError(f"'ssim_window' {cfg.ssim_window} exceeds the image size {ref.shape[:2]}.")
    total = None
    count = 0.0
    for view, mask in zip(warped, masks):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.sum() == 0:
            continue
        ssim = _masked_ssim_map(ref, view, mask, cfg)
        dissimilarity = ad.clip(ad.mul(ad.sub(1.0, ssim), 0.5), 0.0, 1.0)
        term = ad.sum_(ad.mul(ad.mean(dissimilarity, axis=2), mask))
        total = term if total is None else ad.add(total, term)
        count += mask.sum()
    if total is None:
        return ad.constant(0.0)
    return ad.div(total, count)


def photometric_loss_from_depth(depth, views, cfg):
    """
    Photometric consistency of a reference depth map against all source
    views: top-k reprojection error plus the weighted SSIM term.

    Parameters
    ----------
    depth : np.ndarray or Var
        (H, W) reference depth.
    views : list of PosedImage
        Reference followed by M source views.
    cfg : PhotoLossConfig

    Returns
    -------
    Var
        Scalar loss.
    """
    if len(views) < 2:
        raise ValueError('The photometric loss needs a reference and at least one source view.')
    if cfg.top_k > len(views) - 1:
        raise ValueError(f"'top_k' = {cfg.top_k} exceeds the {len(views) - 1} source views.")
    ref = views[0]
    warped, masks, maps = [], [], []
    for src in views[1:]:
        image, mask = inverse_warp(src, ref.camera, depth)
        warped.append(image)
        masks.append(mask)
        maps.append(reproj_error_per_view(ref.image, image, mask, cfg))
    reproj = topk_reproj(maps, masks, cfg.top_k)
    return ad.add(reproj, ad.mul(ssim_loss(ref.image, warped, masks, cfg), cfg.ssim_weight))


def photometric_loss(params, views, hyps, cfg, n_views):
    """
    Photometric loss of the network prediction: the depth comes from the
    reference and its first ``n_views - 1`` sources, the warping uses all
    source views.
    """
    if not 2 <= n_views <= len(views):
        raise ValueError(f"'n_views' must lie in [2, {len(views)}], got {n_views}.")
    depth = forward(params, views[:n_views], hyps)
    return photometric_loss_from_depth(depth, views, cfg)
