"""Independent reference implementations used by several test modules.

Everything here is deliberately written as plain python loops over numpy
scalars — no torch ops, no shared helpers with the package — so that
agreement between package code and these functions is meaningful evidence
of correctness rather than the same bug twice.
"""

import math

import numpy as np


def bilinear_scalar(field, x, y):
    """Sample one (H, W) array at fractional (x=col, y=row); zero outside."""
    h, w = field.shape
    x0 = math.floor(x)
    y0 = math.floor(y)
    fx = x - x0
    fy = y - y0
    total = 0.0
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy, xx = y0 + dy, x0 + dx
        if 0 <= yy < h and 0 <= xx < w:
            total += wgt * float(field[yy, xx])
    return total


def _softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def deformable_attention_oracle(module, query, reference_points, value_map, flow_map=None):
    """Evaluate the deformable-attention equation one scalar at a time.

    Mirrors the module contract: per head m, output contribution is
    W_m^out sum_k A_mk V_m(p + dp_mk), with V the value-projected map
    (zero outside the grid), A softmax-normalized per head, and dp from a
    linear layer over the query (prefixed by the flow vector read at the
    reference point when the module is flow-conditioned).

    All inputs are torch tensors; returns a numpy array (B, N, C).
    """
    wv = module.value_proj.weight.detach().cpu().numpy()
    bv = module.value_proj.bias.detach().cpu().numpy()
    wo = module.sampling_offsets.weight.detach().cpu().numpy()
    bo = module.sampling_offsets.bias.detach().cpu().numpy()
    wa = module.attention_weights.weight.detach().cpu().numpy()
    ba = module.attention_weights.bias.detach().cpu().numpy()
    wout = module.output_proj.weight.detach().cpu().numpy()
    bout = module.output_proj.bias.detach().cpu().numpy()

    q = query.detach().cpu().numpy()
    refs = reference_points.detach().cpu().numpy()
    fmap = value_map.detach().cpu().numpy()
    flow = None if flow_map is None else flow_map.detach().cpu().numpy()

    nb, nq, c = q.shape
    heads, k = module.num_heads, module.num_points
    d = c // heads
    _, _, h, w = fmap.shape

    # Value projection applied cell by cell; the zero padding then lives in
    # the projected space, matching the module.
    vproj = np.zeros((nb, c, h, w))
    for b in range(nb):
        for i in range(h):
            for j in range(w):
                for out_c in range(c):
                    acc = bv[out_c]
                    for in_c in range(c):
                        acc += wv[out_c, in_c] * fmap[b, in_c, i, j]
                    vproj[b, out_c, i, j] = acc

    out = np.zeros((nb, nq, c))
    for b in range(nb):
        for n in range(nq):
            x = refs[b, n, 0] * w - 0.5
            y = refs[b, n, 1] * h - 0.5
            if module.flow_conditioned:
                fvec = [bilinear_scalar(flow[b, 0], x, y), bilinear_scalar(flow[b, 1], x, y)]
                inp = np.concatenate([fvec, q[b, n]])
            else:
                inp = q[b, n]
            offs = wo @ inp + bo                  # (heads*k*2,)
            logits = wa @ q[b, n] + ba            # (heads*k,)
            per_head = np.zeros(c)
            for m in range(heads):
                attn = _softmax([logits[m * k + kk] for kk in range(k)])
                for kk in range(k):
                    dx = offs[(m * k + kk) * 2 + 0]
                    dy = offs[(m * k + kk) * 2 + 1]
                    for dd in range(d):
                        per_head[m * d + dd] += attn[kk] * bilinear_scalar(
                            vproj[b, m * d + dd], x + dx, y + dy
                        )
            out[b, n] = wout @ per_head + bout
    return out


def mask_logits_oracle(query_embeddings, context_map):
    """Literal dot-product mask logits: (M, C) x (C, H, W) -> (M, H, W)."""
    m, c = query_embeddings.shape
    _, h, w = context_map.shape
    out = np.zeros((m, h, w))
    for i in range(m):
        for r in range(h):
            for col in range(w):
                acc = 0.0
                for ch in range(c):
                    acc += float(query_embeddings[i, ch]) * float(context_map[ch, r, col])
                out[i, r, col] = acc
    return out


def brute_force_assignment(cost):
    """Minimum-cost one-to-one assignment by exhaustive permutation search.

    ``cost`` is (n_rows, n_cols); every row or every column (whichever side
    is smaller) gets assigned.  Returns (best_cost, row_idx, col_idx) with
    indices sorted by row.
    """
    import itertools

    cost = np.asarray(cost, dtype=float)
    n_rows, n_cols = cost.shape
    transpose = n_rows > n_cols
    if transpose:
        cost = cost.T
        n_rows, n_cols = n_cols, n_rows
    best = None
    for cols in itertools.permutations(range(n_cols), n_rows):
        total = sum(cost[r, c] for r, c in enumerate(cols))
        if best is None or total < best[0]:
            best = (total, list(range(n_rows)), list(cols))
    total, rows, cols = best
    if transpose:
        rows, cols = cols, rows
    order = np.argsort(rows)
    return total, np.asarray(rows)[order], np.asarray(cols)[order]


def finite_difference_gradients(fn, tensors, step=1e-5):
    """Central-difference gradients of a scalar function, one element at a time.

    ``tensors`` must be float64 leaf tensors with ``requires_grad=True``;
    ``fn()`` recomputes the scalar from their current values.  Returns one
    numpy gradient array per tensor.
    """
    import torch

    grads = []
    with torch.no_grad():
        for t in tensors:
            g = np.zeros(t.numel())
            flat = t.view(-1)
            for i in range(t.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = float(fn())
                flat[i] = orig - step
                lo = float(fn())
                flat[i] = orig
                g[i] = (hi - lo) / (2.0 * step)
            grads.append(g.reshape(tuple(t.shape)))
    return grads


def check_gradients(fn, tensors, step=1e-5, rtol=1e-4, atol=1e-6):
    """Compare autograd gradients of ``fn`` against central differences.

    Returns the worst normalized error max(|a - n| / max(1, |n|)) across
    all elements of all tensors; raises AssertionError when any element
    violates |a - n| <= atol + rtol * max(1, |n|).
    """
    import torch

    for t in tensors:
        if t.grad is not None:
            t.grad = None
    value = fn()
    value.backward()
    analytic = [t.grad.detach().cpu().numpy().copy() for t in tensors]
    numeric = finite_difference_gradients(fn, tensors, step=step)
    worst = 0.0
    for a, n, t in zip(analytic, numeric, tensors):
        denom = np.maximum(1.0, np.abs(n))
        err = np.abs(a - n) / denom
        worst = max(worst, float(err.max()))
        if not np.all(np.abs(a - n) <= atol + rtol * denom):
            idx = np.unravel_index(np.argmax(err), err.shape)
            raise AssertionError(
                f"gradient mismatch for tensor of shape {tuple(t.shape)} at {idx}: "
                f"analytic={a[idx]:.8g} numeric={n[idx]:.8g}"
            )
    return worst
