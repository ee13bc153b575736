"""Small encoder-decoder segmentation net and its training/checkpoint helpers."""
from __future__ import annotations

import math
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_FORMAT = "ctfs-model"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def _conv(cin, cout):
    # GroupNorm: batch-independent, so train/eval and EMA teachers behave alike
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(math.gcd(cout, 4), cout),
                         nn.ReLU(inplace=True))


class SegNet(nn.Module):
    """Four-level U-shaped net on a stride-2 stem.

    The stem halves the resolution once so the encoder runs at H/2; the head
    upsamples back and sees the raw input through a skip, so output logits
    keep the input's spatial size.
    """

    def __init__(self, num_classes: int = 4, widths=(8, 16, 32, 64), in_channels: int = 1):
        super().__init__()
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.stem = _conv(in_channels, widths[0])
        self.stem[0].stride = (2, 2)
        enc, prev = [], widths[0]
        for c in widths:
            enc.append(nn.Sequential(_conv(prev, c), _conv(c, c)))
            prev = c
        self.encoder = nn.ModuleList(enc)
        rev = widths[::-1]
        self.decoder = nn.ModuleList(_conv(a + b, b) for a, b in zip(rev[:-1], rev[1:]))
        self.head = nn.Conv2d(widths[0] + in_channels, num_classes, 3, padding=1)

    def forward(self, x):
        inp = x
        x = self.stem(x)
        skips = []
        for i, block in enumerate(self.encoder):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        for block, skip in zip(self.decoder, skips[-2::-1]):
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = block(torch.cat([x, skip], 1))
        x = F.interpolate(x, size=inp.shape[-2:], mode="bilinear", align_corners=False)
        return self.head(torch.cat([x, inp], 1))

    def param_groups(self):
        """(encoder params, decoder params) for separate learning rates."""
        enc = list(self.stem.parameters()) + list(self.encoder.parameters())
        dec = list(self.decoder.parameters()) + list(self.head.parameters())
        return enc, dec


def build_model(num_classes: int, widths=(8, 16, 32, 64), seed: int | None = None) -> SegNet:
    if seed is not None:
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
    net = SegNet(num_classes, widths)
    if seed is not None:
        torch.random.set_rng_state(gen_state)
    return net


def get_params(net: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Detached copy of every named parameter."""
    return OrderedDict((k, v.detach().clone()) for k, v in net.named_parameters())


def set_params(net: nn.Module, params) -> None:
    own = dict(net.named_parameters())
    if set(own) != set(params):
        raise ValueError("parameter names do not match the architecture")
    with torch.no_grad():
        for k, p in own.items():
            if p.shape != params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {tuple(p.shape)} vs {tuple(params[k].shape)}")
            p.copy_(params[k])


def as_batch(img, dtype=torch.float32) -> torch.Tensor:
    """(H, W) / (N, H, W) arrays or tensors -> (N, 1, H, W) tensor."""
    t = torch.as_tensor(np.asarray(img) if not torch.is_tensor(img) else img)
    t = t.to(dtype)
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[:, None]
    if t.dim() != 4:
        raise ValueError(f"cannot interpret input of shape {tuple(t.shape)} as an image batch")
    return t


def predict(net: nn.Module, img, expected_shape=None) -> torch.Tensor:
    """Class probabilities (N, C, H, W) without gradient tracking."""
    x = as_batch(img, dtype=next(net.parameters()).dtype)
    if expected_shape is not None and tuple(x.shape[-2:]) != tuple(expected_shape):
        raise ValueError(f"image shape {tuple(x.shape[-2:])} != configured {tuple(expected_shape)}")
    was_training = net.training
    net.eval()
    with torch.no_grad():
        probs = torch.softmax(net(x), dim=1)
    net.train(was_training)
    return probs


def make_optimizer(net: SegNet, encoder_lr=5e-4, decoder_lr=2e-4, weight_decay=0.01):
    enc, dec = net.param_groups()
    return torch.optim.AdamW(
        [{"params": enc, "lr": encoder_lr}, {"params": dec, "lr": decoder_lr}],
        weight_decay=weight_decay,
    )


def train_step(net: nn.Module, optimizer, loss_fn, batch):
    """One gradient step on ``loss_fn(net, batch)``.

    ``loss_fn`` returns either a scalar tensor or ``(tensor, extras)``; the
    extras are passed back untouched. Returns ``(loss_value, extras)``.
    """
    if batch is None or (hasattr(batch, "__len__") and len(batch) == 0):
        raise ValueError("empty batch")
    net.train()
    out = loss_fn(net, batch)
    loss, extras = out if isinstance(out, tuple) else (out, None)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()!r}; step aborted")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach()), extras


# -------------------------------------------------------------- checkpoints


def model_state(net: SegNet) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "num_classes": net.num_classes,
        "widths": list(net.widths),
        "params": OrderedDict((k, v.detach().clone()) for k, v in net.state_dict().items()),
    }


def model_from_state(state: dict, num_classes: int | None = None) -> SegNet:
    if state.get("format") != CHECKPOINT_FORMAT or state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint header {state.get('format')!r} v{state.get('version')!r}")
    if num_classes is not None and state["num_classes"] != num_classes:
        raise CheckpointError(
            f"checkpoint has {state['num_classes']} classes, dataset has {num_classes}")
    net = SegNet(state["num_classes"], tuple(state["widths"]))
    net.load_state_dict(state["params"])
    return net


def save_model(net: SegNet, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(model_state(net), path)


def load_model(path, num_classes: int | None = None) -> SegNet:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if "student" in state:  # full training checkpoint
        state = state["student"]
    return model_from_state(state, num_classes)
