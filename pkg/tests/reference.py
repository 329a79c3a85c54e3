"""Plain-numpy reference computations used as independent test oracles.

Nothing here touches the autodiff engine: loops are explicit and every
quantity is recomputed from raw parameter arrays.
"""
import math

import numpy as np
from scipy import special


def ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def gelu(x):
    return 0.5 * x * (1.0 + special.erf(x / math.sqrt(2.0)))


def softmax_rows(z):
    out = np.empty_like(z)
    for i in range(z.shape[0]):
        e = np.exp(z[i] - z[i].max())
        out[i] = e / e.sum()
    return out


def unfold(image, patch):
    """Explicit patch extraction: (C, H, W) -> list of flattened patches, row-major."""
    c, h, w = image.shape
    rows = []
    for gy in range(h // patch):
        for gx in range(w // patch):
            vec = []
            for ch in range(c):
                for py in range(patch):
                    for px in range(patch):
                        vec.append(image[ch, gy * patch + py, gx * patch + px])
            rows.append(vec)
    return np.array(rows)


def reference_forward(params, config, image, injection=None, offsets=None):
    """Single-image forward. Returns (feature, attentions, last_scores, tokens)."""
    p = {k: np.asarray(getattr(v, "data", v)) for k, v in params.items()}
    d, h = config.width, config.heads
    dh = d // h
    tokens = unfold(image, config.patch_size) @ p["patch_embed.weight"] + p["patch_embed.bias"]
    tokens = tokens + p["pos_embed"][1:]
    cls = p["cls_token"][0] + p["pos_embed"][0]
    x = np.vstack([cls[None], tokens])
    attentions, last_scores = [], None
    for l in range(config.layers):
        pre = f"blocks.{l}."
        y = ln(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        q = y @ p[pre + "attn.wq.weight"] + p[pre + "attn.wq.bias"]
        k = y @ p[pre + "attn.wk.weight"] + p[pre + "attn.wk.bias"]
        v = y @ p[pre + "attn.wv.weight"] + p[pre + "attn.wv.bias"]
        if injection is not None:
            k = np.vstack([k, injection[l][0]])
            v = np.vstack([v, injection[l][1]])
        heads_out, layer_attn = [], []
        for n in range(h):
            sl = slice(n * dh, (n + 1) * dh)
            scores = np.zeros((x.shape[0], k.shape[0]))
            for i in range(x.shape[0]):
                for j in range(k.shape[0]):
                    scores[i, j] = np.dot(q[i, sl], k[j, sl]) / math.sqrt(dh)
            a = softmax_rows(scores)
            layer_attn.append(a)
            heads_out.append(a @ v[:, sl])
            if l == config.layers - 1:
                last_scores = last_scores if last_scores is not None else []
                last_scores.append(scores[0, 1:1 + config.n_patches])
        attentions.append(np.stack(layer_attn))
        out = np.hstack(heads_out) @ p[pre + "attn.wo.weight"] + p[pre + "attn.wo.bias"]
        if offsets is not None:
            out = out + offsets[0][l]
        x = x + out
        y = ln(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        f = gelu(y @ p[pre + "ffn.fc1.weight"] + p[pre + "ffn.fc1.bias"])
        f = f @ p[pre + "ffn.fc2.weight"] + p[pre + "ffn.fc2.bias"]
        if offsets is not None:
            f = f + offsets[1][l]
        x = x + f
    feat = ln(x[0], p["norm.gain"], p["norm.bias"])
    return feat, attentions, np.stack(last_scores), tokens


def attentive_embedding_loops(tokens, scores):
    """Head-averaged attention pooling with explicit double sums over heads and patches."""
    h, m_count = scores.shape
    out = np.zeros(tokens.shape[1])
    for n in range(h):
        row = scores[n]
        w = np.exp(row - row.max())
        w = w / w.sum()
        for m in range(m_count):
            out += w[m] * tokens[m]
    return out / h


def random_params(config, rng, scale=0.3):
    """Backbone parameters with non-trivial gains/biases so oracles see every term."""
    from ett.backbone import Backbone

    shapes = {k: v.shape for k, v in Backbone(config).params.items()}
    out = {}
    for name, shape in shapes.items():
        if name.endswith(".gain"):
            out[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        else:
            out[name] = scale * rng.standard_normal(shape)
    return out
