"""Central-difference checks over dictionaries of parameter arrays (float64)."""
import numpy as np

from fetrack.numerics import Rng, finite_diff_grad


def pick_entries(analytic, rng: Rng, limit):
    """All flat indices when small; otherwise the largest-gradient entries plus random ones."""
    n = analytic.size
    if n <= limit:
        return np.arange(n)
    flat = np.abs(analytic.reshape(-1))
    top = np.argsort(flat)[::-1][: limit // 2]
    rest = rng.integers(0, n, size=limit - len(top))
    return np.unique(np.concatenate([top, rest]))


def group_errors(loss, params, grads, rng=None, limit=12, h=1e-6, names=None):
    """Relative error per parameter group.

    ``loss(params) -> float`` must not mutate ``params``. The error of a group
    is max |analytic - numeric| over the checked entries divided by the largest
    magnitude among them.
    """
    rng = rng or Rng(0)
    errors = {}
    for name in names or sorted(params):
        x0 = params[name]
        idx = pick_entries(grads[name], rng, limit)

        def f(v, name=name):
            return loss(dict(params, **{name: v}))

        num = finite_diff_grad(f, x0, h=h, index=idx).reshape(-1)[idx]
        ana = np.asarray(grads[name], dtype=np.float64).reshape(-1)[idx]
        scale = max(np.abs(ana).max(), np.abs(num).max(), 1e-10)
        errors[name] = float(np.abs(ana - num).max() / scale)
    return errors


# ---------------------------------------------------------------- cases
# Each case builds a tiny float64 instance from ``seed`` and returns the
# per-group relative errors. Inputs ("input.*") are checked alongside weights.

def condition(params, rng):
    """Add O(1) noise to every parameter.

    At the default init (0.02 projections, small dt) many gradients are ~1e-9,
    where central differences only measure rounding noise.
    """
    out = {}
    for k, v in params.items():
        scale = 1.0 / np.sqrt(v.shape[0]) if v.ndim == 2 else 0.3
        out[k] = v + rng.normal(v.shape, scale)
    return out


def _project(out, weights):
    return float((out * weights).sum())


def vim_block_case(seed, limit=8):
    from fetrack import blocks

    rng = Rng(seed)
    C = 6
    p = condition(blocks.init_vim_block(rng, C, 3, 3, 2, 2, np.float64), rng)
    h = rng.normal((2, 7, C))
    w = rng.normal((2, 7, C))
    out, cache = blocks.vim_block_fwd(h, p)
    g_h, grads = blocks.vim_block_bwd(cache, w)
    params = dict(p, **{"input.h": h})
    grads = dict(grads, **{"input.h": g_h})

    def loss(q):
        q = dict(q)
        x = q.pop("input.h")
        return _project(blocks.vim_block_fwd(x, q)[0], w)

    return group_errors(loss, params, grads, rng, limit)


def fusion_case(seed, limit=8):
    from fetrack import blocks

    rng = Rng(seed)
    C = 5
    p = condition(blocks.init_fusion(rng, C, 3, 3, 2, 1, np.float64), rng)
    fr, fe = rng.normal((2, 6, C)), rng.normal((2, 6, C))
    wr, we = rng.normal((2, 6, C)), rng.normal((2, 6, C))
    _, cache = blocks.fusion_fwd(fr, fe, p)
    g_r, g_e, grads = blocks.fusion_bwd(cache, wr, we)
    params = dict(p, **{"input.rgb": fr, "input.event": fe})
    grads = dict(grads, **{"input.rgb": g_r, "input.event": g_e})

    def loss(q):
        q = dict(q)
        a, b = q.pop("input.rgb"), q.pop("input.event")
        (ra, eb), _ = blocks.fusion_fwd(a, b, q)
        return _project(ra, wr) + _project(eb, we)

    return group_errors(loss, params, grads, rng, limit)


def head_case(seed, limit=8):
    from fetrack.tracker.head import head_bwd, head_fwd, init_head

    rng = Rng(seed)
    p, buffers = init_head(rng, 6, 2, np.float64)
    p = condition(p, rng)
    tokens = rng.normal((2, 16, 6))
    wc, wo, ws = rng.normal((2, 4, 4)), rng.normal((2, 4, 4, 2)), rng.normal((2, 4, 4, 2))

    def run(q, x):
        # train mode (batch statistics); fresh buffers because they update in place
        bufs = {k: v.copy() for k, v in buffers.items()}
        return head_fwd(x, q, bufs, train=True)

    _, cache = run(p, tokens)
    g_x, grads = head_bwd(cache, p, wc, wo, ws)
    params = dict(p, **{"input.tokens": tokens})
    grads = dict(grads, **{"input.tokens": g_x})

    def loss(q):
        q = dict(q)
        x = q.pop("input.tokens")
        out, _ = run(q, x)
        return _project(out.cls, wc) + _project(out.offset, wo) + _project(out.size, ws)

    return group_errors(loss, params, grads, rng, limit)


TINY = dict(channels=4, depth=1, d_state=2, d_conv=3, patch=4, template_size=8, search_size=16, head_layers=2)


def model_case(seed, limit=3, h=1e-5):
    """Full tiny model, training-mode forward, tracking loss at the default weights.

    The larger step keeps rounding noise of the summed loss well below 1e-5.
    """
    from fetrack.tracker.losses import tracking_loss
    from fetrack.tracker.model import ModelConfig, backward, forward, init_model

    cfg = ModelConfig(**TINY)
    model = init_model(cfg, seed, np.float64)
    rng = Rng(seed + 1000)
    model.params = condition(model.params, rng)
    inputs = {f"{m}_{k}": rng.normal((2, s, s, 3))
              for m in ("rgb", "event") for k, s in (("z", 8), ("x", 16))}
    gt = np.column_stack([rng.uniform(0.3, 0.7, 2), rng.uniform(0.3, 0.7, 2),
                          rng.uniform(0.15, 0.4, 2), rng.uniform(0.15, 0.4, 2)])

    def run(params):
        m = model.copy()
        m.params = params
        out, cache = forward(m, inputs, train=True)
        return m, out, cache

    m, out, cache = run(model.params)
    _, g, _ = tracking_loss(out, gt)
    grads = backward(m, cache, *g)
    return group_errors(lambda q: tracking_loss(run(q)[1], gt)[0], model.params, grads, rng, limit, h)


def scan_case(seed, limit=64):
    from fetrack.ssm import ScanInputs, SsmParams, selective_scan_backward, selective_scan_seq

    rng = Rng(seed)
    L, D, N = 9, 3, 4
    arrays = {"x_prime": rng.normal((L, D)), "B_t": rng.normal((L, N)), "C_t": rng.normal((L, N)),
              "delta": np.exp(rng.normal((L, D), 0.5)) * 0.3,
              "A_log": rng.normal((D, N), 0.5), "D_skip": rng.normal(D)}
    gy = rng.normal((L, D))

    def split(a):
        a = dict(a)
        return SsmParams(a.pop("A_log"), a.pop("D_skip")), ScanInputs(**a)

    g = selective_scan_backward(*split(arrays), gy)
    grads = {k: getattr(g, k) for k in arrays}
    return group_errors(lambda a: float((selective_scan_seq(*split(a)).y * gy).sum()),
                        arrays, grads, rng, limit)


CASES = {"selective scan": scan_case, "vim block": vim_block_case, "fusion block": fusion_case,
         "head": head_case, "full toy model": model_case}
