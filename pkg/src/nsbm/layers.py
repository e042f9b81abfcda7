"""Small parameter helpers: affine layers stored as named tensors."""

import numpy as np

from .numerics import tensor


def init_linear(rng, d_in, d_out, bias=True, scale=None, identity=False):
    """Return ``{"W": (d_in, d_out), "b": (d_out,)}`` with Glorot-uniform weights.

    ``identity=True`` starts from the identity map (requires ``d_in == d_out``)
    with a zero bias.
    """
    if identity:
        if d_in != d_out:
            raise ValueError("identity init needs d_in == d_out")
        W = np.eye(d_in)
    else:
        limit = np.sqrt(6.0 / (d_in + d_out)) if scale is None else scale
        W = rng.uniform(-limit, limit, size=(d_in, d_out))
    out = {"W": tensor(W, requires_grad=True)}
    if bias:
        out["b"] = tensor(np.zeros(d_out), requires_grad=True)
    return out


def linear(x, layer):
    """Row-vector affine map ``x W + b``."""
    y = x @ layer["W"]
    if "b" in layer:
        y = y + layer["b"]
    return y


def flatten_params(groups, prefix=""):
    """Flatten nested dicts of tensors into ``{"a.b.W": tensor}``."""
    out = {}
    for key, value in groups.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten_params(value, name + "."))
        else:
            out[name] = value
    return out
