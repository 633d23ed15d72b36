"""Chunked online inference with carried per-block state.

A stream over an online encoder (or a :class:`~s4former.training.SequenceModel`
wrapping one) reproduces the full-sequence eval-mode forward over the
concatenated chunks. Per block it carries attention keys/values, the last
``k-1`` frames entering each depthwise convolution, and S4D hidden states.
REP modules stream as a plain finite convolution with the kernel
materialized once at :func:`open_stream`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import torch

from .conv_module import Approach, Context, ConvModule, Encoder, depthwise_causal_conv
from .s4d import DiscreteS4D, S4DState


class StaleStateError(RuntimeError):
    """The model changed after the stream was opened."""


@dataclass
class BlockState:
    attn_k: torch.Tensor | None = None
    attn_v: torch.Tensor | None = None
    conv_tail: torch.Tensor | None = None
    s4: S4DState | None = None
    disc: DiscreteS4D | None = None
    rep_kernel: torch.Tensor | None = None


@dataclass
class StreamState:
    blocks: list[BlockState]
    fingerprint: str
    frames: int = 0
    closed: bool = False
    batch_shape: tuple | None = field(default=None)
    conv_path: str = "auto"

    def reset(self) -> None:
        for bs in self.blocks:
            bs.attn_k = bs.attn_v = bs.conv_tail = None
            bs.s4 = None
        self.frames = 0
        self.closed = False
        self.batch_shape = None


def model_fingerprint(model: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, t in model.state_dict().items():
        digest.update(name.encode())
        digest.update(t.detach().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _encoder_of(model) -> Encoder:
    enc = getattr(model, "encoder", model)
    if not isinstance(enc, Encoder):
        raise TypeError("streaming needs an Encoder or a model with an .encoder")
    return enc


def open_stream(model, conv_path: str = "auto") -> StreamState:
    encoder = _encoder_of(model)
    if encoder.context is not Context.ONLINE:
        raise ValueError("streaming requires an online-context encoder")
    blocks = []
    with torch.no_grad():
        for block in encoder.blocks:
            conv = block.conv
            bs = BlockState()
            if conv.s4d is not None and conv.approach is not Approach.REP:
                bs.disc = conv.s4d.discretize()
            if conv.approach is Approach.REP:
                bs.rep_kernel = conv.rep_kernel()
            blocks.append(bs)
    return StreamState(blocks=blocks, fingerprint=model_fingerprint(model), conv_path=conv_path)


def close_stream(state: StreamState) -> None:
    state.closed = True


def _conv_with_tail(z, tail, kernel, path):
    keep = kernel.shape[1] - 1
    zz = z if tail is None else torch.cat([tail, z], dim=-2)
    y = depthwise_causal_conv(zz, kernel, Context.ONLINE, path)[..., -z.shape[-2]:, :]
    return y, zz[..., max(0, zz.shape[-2] - keep):, :]


def _stream_core(conv: ConvModule, bs: BlockState, z: torch.Tensor, path: str) -> torch.Tensor:
    if conv.approach is Approach.REP:
        y, bs.conv_tail = _conv_with_tail(z, bs.conv_tail, bs.rep_kernel, path)
        return y
    if conv.approach in (Approach.BASELINE, Approach.COM):
        z, bs.conv_tail = _conv_with_tail(z, bs.conv_tail, conv.dw_kernel, path)
        if conv.approach is Approach.BASELINE:
            return z
    if bs.s4 is None:
        bs.s4 = S4DState.zeros(conv.s4d.n_channels, conv.s4d.n_state, z.shape[:-2])
    y, bs.s4 = conv.s4d.scan(z, bs.s4, bs.disc)
    return y


def process_chunk(model, state: StreamState, chunk: torch.Tensor):
    """Feed ``chunk [t, F]`` or ``[B, t, F]``; returns ``(output, state)``."""
    if state.closed:
        raise ValueError("stream is closed")
    if model.training:
        raise ValueError("streaming runs in eval mode; call model.eval()")
    if model_fingerprint(model) != state.fingerprint:
        raise StaleStateError("model parameters changed since the stream was opened")
    squeeze = chunk.dim() == 2
    x = chunk.unsqueeze(0) if squeeze else chunk
    if x.shape[-2] < 1:
        raise ValueError("chunk must contain at least one frame")
    if state.batch_shape is None:
        state.batch_shape = tuple(x.shape[:-2])
    elif tuple(x.shape[:-2]) != state.batch_shape:
        raise ValueError("batch shape changed mid-stream")

    encoder = _encoder_of(model)
    input_proj = getattr(model, "input_proj", None)
    readout = getattr(model, "readout", None)
    with torch.no_grad():
        if input_proj is not None:
            x = input_proj(x)
        for block, bs in zip(encoder.blocks, state.blocks):
            x = block.ffn(x)
            if block.attn is not None:
                q, k, v = block.attn.project(x)
                bs.attn_k = k if bs.attn_k is None else torch.cat([bs.attn_k, k], dim=-2)
                bs.attn_v = v if bs.attn_v is None else torch.cat([bs.attn_v, v], dim=-2)
                x = x + block.attn.attend(q, bs.attn_k, bs.attn_v, offset=state.frames)
            conv = block.conv
            x = conv.post(x, _stream_core(conv, bs, conv.pre(x), state.conv_path))
            x = block.norm(x)
        if readout is not None:
            x = readout(x)
    state.frames += chunk.shape[-2]
    return (x.squeeze(0) if squeeze else x), state


def stream_sequence(model, x: torch.Tensor, chunk_sizes, conv_path: str = "auto") -> torch.Tensor:
    """Stream ``x`` through a fresh state using the given chunk partition."""
    state = open_stream(model, conv_path)
    outs, start = [], 0
    for size in chunk_sizes:
        out, state = process_chunk(model, state, x[..., start : start + size, :])
        outs.append(out)
        start += size
    if start != x.shape[-2]:
        raise ValueError("chunk sizes do not cover the sequence")
    return torch.cat(outs, dim=-2)
