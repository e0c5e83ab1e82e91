"""Numba kernels: per-pixel front-to-back alpha compositing and its adjoint.

Gaussians are handed over already sorted by depth; each pixel's list keeps that
order, so ties are broken by the caller's sort. Loops are sequential so every
render and every gradient is bit-reproducible.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def build_pixel_lists(order, bbox, width, height):
    counts = np.zeros(width * height + 1, dtype=np.int64)
    for g in order:
        x0, x1, y0, y1 = bbox[g, 0], bbox[g, 1], bbox[g, 2], bbox[g, 3]
        for py in range(y0, y1 + 1):
            base = py * width
            for px in range(x0, x1 + 1):
                counts[base + px + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for g in order:
        x0, x1, y0, y1 = bbox[g, 0], bbox[g, 1], bbox[g, 2], bbox[g, 3]
        for py in range(y0, y1 + 1):
            base = py * width
            for px in range(x0, x1 + 1):
                pix = base + px
                ids[fill[pix]] = g
                fill[pix] += 1
    return offsets, ids


@njit(cache=True)
def rasterize_forward(offsets, ids, means2d, conics, opac, colors, width, height, alpha_min, alpha_max, t_min):
    img = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    n_used = np.zeros(width * height, dtype=np.int64)
    for py in range(height):
        for px in range(width):
            pix = py * width + px
            T = 1.0
            r = 0.0
            gch = 0.0
            b = 0.0
            start = offsets[pix]
            end = offsets[pix + 1]
            k = start
            while k < end:
                g = ids[k]
                dx = px - means2d[g, 0]
                dy = py - means2d[g, 1]
                power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                if power > 0.0:
                    k += 1
                    continue
                alpha = opac[g] * np.exp(power)
                if alpha > alpha_max:
                    alpha = alpha_max
                if alpha < alpha_min:
                    k += 1
                    continue
                test_T = T * (1.0 - alpha)
                if test_T < t_min:
                    break
                w = alpha * T
                r += w * colors[g, 0]
                gch += w * colors[g, 1]
                b += w * colors[g, 2]
                T = test_T
                k += 1
            n_used[pix] = k - start
            img[py, px, 0] = r
            img[py, px, 1] = gch
            img[py, px, 2] = b
            trans[py, px] = T
    return img, trans, n_used


@njit(cache=True)
def rasterize_backward(
    offsets, ids, n_used, means2d, conics, opac, colors, trans, dl_dimg, width, height, alpha_min, alpha_max
):
    n = means2d.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    for py in range(height):
        for px in range(width):
            pix = py * width + px
            d0 = dl_dimg[py, px, 0]
            d1 = dl_dimg[py, px, 1]
            d2 = dl_dimg[py, px, 2]
            if d0 == 0.0 and d1 == 0.0 and d2 == 0.0:
                continue
            T = trans[py, px]
            # colour composited behind the current primitive
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            start = offsets[pix]
            k = start + n_used[pix] - 1
            while k >= start:
                g = ids[k]
                k -= 1
                dx = px - means2d[g, 0]
                dy = py - means2d[g, 1]
                power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                if power > 0.0:
                    continue
                gauss = np.exp(power)
                raw = opac[g] * gauss
                clamped = raw > alpha_max
                alpha = alpha_max if clamped else raw
                if alpha < alpha_min:
                    continue
                T = T / (1.0 - alpha)
                w = alpha * T
                g_color[g, 0] += w * d0
                g_color[g, 1] += w * d1
                g_color[g, 2] += w * d2
                c0 = colors[g, 0]
                c1 = colors[g, 1]
                c2 = colors[g, 2]
                dl_dalpha = T * ((c0 - s0) * d0 + (c1 - s1) * d1 + (c2 - s2) * d2)
                s0 = alpha * c0 + (1.0 - alpha) * s0
                s1 = alpha * c1 + (1.0 - alpha) * s1
                s2 = alpha * c2 + (1.0 - alpha) * s2
                if clamped:
                    continue
                g_opac[g] += dl_dalpha * gauss
                dl_dpower = dl_dalpha * raw
                g_conic[g, 0] += -0.5 * dx * dx * dl_dpower
                g_conic[g, 1] += -dx * dy * dl_dpower
                g_conic[g, 2] += -0.5 * dy * dy * dl_dpower
                g_mean[g, 0] += (conics[g, 0] * dx + conics[g, 1] * dy) * dl_dpower
                g_mean[g, 1] += (conics[g, 1] * dx + conics[g, 2] * dy) * dl_dpower
    return g_mean, g_conic, g_opac, g_color
