"""Shared independent oracles for the network tests.

Everything here recomputes results with plain numpy loops, deliberately
avoiding the library's own code paths (and autograd), so the tests compare
two genuinely different routes to the same numbers.
"""

from __future__ import annotations

import numpy as np
import torch

from drivefusion.model import FusionModel
from drivefusion.train import joint_loss


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def numpy_forward_oracle(
    model: FusionModel,
    img_prev: np.ndarray,  # (B, 3, H, W), already channel-normalized
    img_curr: np.ndarray,
    sem_prev: np.ndarray | None,
    sem_curr: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Recompute the eval-mode forward pass from the raw parameter arrays."""
    params = {k: v.detach().cpu().numpy().astype(np.float64) for k, v in model.state_dict().items()}
    cfg = model.config

    def conv_gn_relu(x: np.ndarray, block: int) -> np.ndarray:
        w = params[f"backbone.features.{3 * block}.weight"]
        b = params[f"backbone.features.{3 * block}.bias"]
        n, c_in, h, w_in = x.shape
        c_out = w.shape[0]
        h_out = (h + 2 - 3) // 2 + 1
        w_out = (w_in + 2 - 3) // 2 + 1
        padded = np.zeros((n, c_in, h + 2, w_in + 2))
        padded[:, :, 1:-1, 1:-1] = x
        out = np.zeros((n, c_out, h_out, w_out))
        for i in range(n):
            for co in range(c_out):
                for y in range(h_out):
                    for xx in range(w_out):
                        window = padded[i, :, 2 * y : 2 * y + 3, 2 * xx : 2 * xx + 3]
                        out[i, co, y, xx] = np.sum(window * w[co]) + b[co]
        # GroupNorm with one group: normalize over (C, H, W) per sample
        gw = params[f"backbone.features.{3 * block + 1}.weight"]
        gb = params[f"backbone.features.{3 * block + 1}.bias"]
        for i in range(n):
            mu = out[i].mean()
            var = out[i].var()
            out[i] = (out[i] - mu) / np.sqrt(var + 1e-5)
            out[i] = out[i] * gw[:, None, None] + gb[:, None, None]
        return np.maximum(out, 0.0)

    def backbone(x: np.ndarray) -> np.ndarray:
        out = x.astype(np.float64)
        for block in range(len(cfg.backbone.desk_channels)):
            out = conv_gn_relu(out, block)
        return out.reshape(out.shape[0], -1)

    def linear(x, prefix):
        return x @ params[f"{prefix}.weight"].T + params[f"{prefix}.bias"]

    def encoder(x):
        h = np.maximum(linear(x.astype(np.float64), "semantic_encoder.net.0"), 0.0)
        return np.maximum(linear(h, "semantic_encoder.net.2"), 0.0)

    def lstm(seq):
        w_ih = params["lstm.weight_ih_l0"]
        w_hh = params["lstm.weight_hh_l0"]
        b_ih = params["lstm.bias_ih_l0"]
        b_hh = params["lstm.bias_hh_l0"]
        hidden = w_hh.shape[1]
        n = seq.shape[0]
        h = np.zeros((n, hidden))
        c = np.zeros((n, hidden))
        for t in range(seq.shape[1]):
            gates = seq[:, t, :] @ w_ih.T + b_ih + h @ w_hh.T + b_hh
            i_g = _sigmoid(gates[:, 0:hidden])
            f_g = _sigmoid(gates[:, hidden : 2 * hidden])
            g_g = np.tanh(gates[:, 2 * hidden : 3 * hidden])
            o_g = _sigmoid(gates[:, 3 * hidden : 4 * hidden])
            c = f_g * c + i_g * g_g
            h = o_g * np.tanh(c)
        return h

    def head(x, name):
        out = x
        for layer in (0, 3, 6):  # (Linear, ReLU, Dropout) x3; dropout is identity in eval
            out = np.maximum(linear(out, f"{name}.net.{layer}"), 0.0)
        return linear(out, f"{name}.net.9")[:, 0]

    feat_prev = backbone(img_prev)
    feat_curr = backbone(img_curr)
    if cfg.use_semantic:
        enc_prev = encoder(sem_prev)
        enc_curr = encoder(sem_curr)
        step_prev = np.concatenate([feat_prev, enc_prev], axis=1)
        step_curr = np.concatenate([feat_curr, enc_curr], axis=1)
    else:
        enc_curr = None
        step_prev, step_curr = feat_prev, feat_curr
    seq = np.stack([step_prev, step_curr], axis=1)
    last = lstm(seq)
    if cfg.lstm_bypass == "semantic" and enc_curr is not None:
        fused = np.concatenate([last, enc_curr], axis=1)
    elif cfg.lstm_bypass == "image":
        fused = np.concatenate([last, feat_curr], axis=1)
    else:
        fused = last
    return head(fused, "angle_head"), head(fused, "speed_head")


def finite_difference_gradients(
    model: FusionModel,
    inputs: tuple[torch.Tensor, ...],
    target_norm: torch.Tensor,
    eps: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Central-difference joint-loss gradients for every parameter entry."""

    def loss_value() -> float:
        with torch.no_grad():
            pred, _ = model(*inputs)
            return float(joint_loss(pred, target_norm))

    grads: dict[str, np.ndarray] = {}
    for name, param in model.named_parameters():
        flat = param.data.view(-1)
        grad = np.zeros(flat.numel())
        for j in range(flat.numel()):
            original = float(flat[j])
            flat[j] = original + eps
            up = loss_value()
            flat[j] = original - eps
            down = loss_value()
            flat[j] = original
            grad[j] = (up - down) / (2 * eps)
        grads[name] = grad.reshape(tuple(param.shape))
    return grads
