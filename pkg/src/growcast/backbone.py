"""Trainable forecasting network over a growing graph.

The architecture is node-count-free: an input projection, two graph
convolutions around one temporal convolution, and a pooled linear head,
so the same parameter set serves every period of the stream.  Prompts are
fused by elementwise addition right after the input projection (raw inputs
are 1-channel while prompts are d-wide, so projection comes first).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .graph_stream import cheb_polynomials, normalize_adjacency, scaled_laplacian

VARIANTS = ("spatial", "spectral")


class BackboneError(ValueError):
    pass


@dataclass
class STGNNBackbone:
    variant: str
    c: int
    d: int
    kernel: int
    K_order: int
    t_out: int
    dropout_p: float
    params: dict  # name -> Parameter

    def parameters(self) -> list:
        return list(self.params.values())

    def set_trainable(self, trainable: bool) -> None:
        for p in self.params.values():
            p.trainable = trainable

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params.values())


def build_backbone(variant: str, d: int = 64, kernel: int = 3, K_order: int = 2,
                   t_out: int = 12, dropout_p: float = 0.0, seed: int = 0,
                   c: int = 1) -> STGNNBackbone:
    """Weights uniform in +-1/sqrt(fan_in), drawn from named seed streams."""
    if variant not in VARIANTS:
        raise BackboneError("unknown backbone variant %r" % variant)
    if d <= 0 or t_out <= 0 or kernel <= 0:
        raise BackboneError("layer sizes must be positive")

    def uniform(name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return nn.Parameter(name, rng(name).uniform(-bound, bound, size=shape))

    def rng(name):
        return nn.rng_stream(seed, "backbone", name)

    params = {}

    def put(p):
        params[p.name] = p

    put(uniform("input_proj.W", (c, d), c))
    put(uniform("input_proj.b", (d,), c))
    if variant == "spatial":
        put(uniform("gconv1.W", (d, d), d))
        put(uniform("gconv2.W", (d, d), d))
    else:
        put(uniform("gconv1.theta", (K_order + 1,), K_order + 1))
        put(uniform("gconv2.theta", (K_order + 1,), K_order + 1))
    put(uniform("tconv.W", (kernel, d, d), kernel * d))
    put(uniform("tconv.b", (d,), kernel * d))
    put(uniform("head.W", (d, t_out), d))
    put(uniform("head.b", (t_out,), d))
    return STGNNBackbone(variant=variant, c=c, d=d, kernel=kernel, K_order=K_order,
                         t_out=t_out, dropout_p=dropout_p, params=params)


def graph_operator(backbone: STGNNBackbone, adjacency: np.ndarray):
    """Precompute the constant propagation operator for one period graph."""
    if backbone.variant == "spatial":
        return normalize_adjacency(adjacency)
    return cheb_polynomials(scaled_laplacian(adjacency), backbone.K_order)


def forward_predict(backbone: STGNNBackbone, operator, inputs, prompt=None,
                    record=None, train: bool = False, rng=None):
    """Run the network on a batch.

    inputs: (B, t_in, n, c); prompt: n x d matrix, ndarray or tape Node,
    or None.  Returns a (B, t_out, n) Node on `record` (a fresh record is
    created when none is given, for evaluation-only calls).
    """
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 4 or x.shape[-1] != backbone.c:
        raise BackboneError("inputs must be (B, t_in, n, %d), got %s"
                            % (backbone.c, x.shape))
    n = x.shape[2]
    op_n = operator.shape[0] if backbone.variant == "spatial" else operator[0].shape[0]
    if op_n != n:
        raise BackboneError("graph operator covers %d nodes, inputs have %d" % (op_n, n))
    if record is None:
        record = nn.ComputeRecord()
    p = backbone.params
    leaf = {name: record.leaf(param) for name, param in p.items()}

    h = nn.linear(record, record.constant(x), leaf["input_proj.W"], leaf["input_proj.b"])
    if prompt is not None:
        pr = prompt if isinstance(prompt, nn.Node) else record.constant(prompt)
        if pr.shape != (n, backbone.d):
            raise BackboneError("prompt shape %s does not match (%d, %d)"
                                % (pr.shape, n, backbone.d))
        h = nn.add(record, h, pr)

    def gconv(h, tag):
        if backbone.variant == "spatial":
            return nn.graph_conv_spatial(record, operator, h, leaf[tag + ".W"])
        return nn.graph_conv_cheb(record, operator, h, leaf[tag + ".theta"])

    drop_p = backbone.dropout_p if train else 0.0
    h = nn.relu(record, gconv(h, "gconv1"))
    h = nn.dropout(record, h, drop_p, rng)
    h = nn.relu(record, nn.temporal_conv(record, h, leaf["tconv.W"], leaf["tconv.b"]))
    h = nn.dropout(record, h, drop_p, rng)
    h = nn.relu(record, gconv(h, "gconv2"))
    h = nn.mean_pool_time(record, h)  # (B, n, d)
    out = nn.linear(record, h, leaf["head.W"], leaf["head.b"])  # (B, n, t_out)

    def grad_fn(g):
        return [np.transpose(g, (0, 2, 1))]

    pred = record.record("transpose", np.transpose(out.value, (0, 2, 1)), [out], grad_fn)
    return pred, record
