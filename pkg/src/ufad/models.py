"""Detector architectures: the single-trunk baseline and the branched net.

Both share the same 4-conv backbone (channels 32/64/128/256, each conv 4x4
stride 2) followed by a 128-dim fully connected feature layer and a 1-dim
score head.  The branched net splits the backbone after `shared_depth` conv
layers into T per-cluster branches whose sigmoid scores feed a final 1-dim
decision layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

CONV_CHANNELS = (32, 64, 128, 256)
FC_DIM = 128

_INIT_NS = 101  # seed-stream namespace for parameter init


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    channels: int = 3
    conv_channels: tuple = CONV_CHANNELS  # narrower only for micro test nets
    fc_dim: int = FC_DIM

    def __post_init__(self):
        if self.image_size < 16 or self.image_size % 16:
            raise ValueError(
                f"image_size must be >= 16 and divisible by 16 "
                f"(four stride-2 convs), got {self.image_size}"
            )
        if len(self.conv_channels) != 4:
            raise ValueError("backbone has exactly four conv layers")

    @property
    def conv_shapes(self):
        """Spatial size after each of the four conv layers."""
        s = self.image_size
        return tuple(s // 2 ** (i + 1) for i in range(4))

    @property
    def flat_dim(self):
        return self.conv_shapes[-1] ** 2 * self.conv_channels[-1]


def _conv_block(prefix, cfg, lo, hi):
    """Conv+leaky layers for backbone positions [lo, hi)."""
    layers = []
    cin = cfg.channels if lo == 0 else cfg.conv_channels[lo - 1]
    for i in range(lo, hi):
        layers.append(nn.Conv4x4(f"{prefix}/L{i}", cin, cfg.conv_channels[i]))
        layers.append(nn.LeakyReLU(f"{prefix}/A{i}"))
        cin = cfg.conv_channels[i]
    return layers


def _chunked(fn, x, chunk=256):
    outs = [fn(x[i : i + chunk]) for i in range(0, len(x), chunk)]
    return [np.concatenate(parts, axis=0) for parts in zip(*outs)]


class JointNet:
    """Binary detector d32-d64-d128-d256-fc128-fc1 with a sigmoid head."""

    kind = "joint"

    def __init__(self, cfg: NetConfig = NetConfig()):
        self.cfg = cfg
        self.features = nn.Stack(
            _conv_block("net", cfg, 0, 4)
            + [
                nn.Dense("net/fc128", cfg.flat_dim, cfg.fc_dim),
                nn.LeakyReLU("net/Afc"),
            ]
        )
        self.head = nn.Stack([nn.Dense("net/fc1", cfg.fc_dim, 1)])
        self._streams = _seed_streams(self, branch_of=lambda name: 0)

    def param_shapes(self):
        return {**self.features.param_shapes(), **self.head.param_shapes()}

    def init_params(self, seed, dtype=np.float32):
        return _init(self, seed, dtype)

    def meta(self):
        return {
            "kind": self.kind,
            "image_size": self.cfg.image_size,
            "channels": self.cfg.channels,
        }

    def forward(self, store, x):
        emb, fctx = self.features.forward(store, x)
        logit, hctx = self.head.forward(store, emb)
        return emb, logit.reshape(-1), (fctx, hctx)

    def loss_and_grads(self, store, x, targets):
        emb, logit, (fctx, hctx) = self.forward(store, x)
        loss, dz = nn.bce_with_logits(logit, targets)
        grads = {}
        demb = self.head.backward(store, hctx, dz.reshape(-1, 1), grads)
        self.features.backward(store, fctx, demb, grads, need_dx=False)
        return loss, grads

    def input_gradient(self, store, x, targets):
        emb, logit, (fctx, hctx) = self.forward(store, x)
        loss, dz = nn.bce_with_logits(logit, targets)
        grads = {}
        demb = self.head.backward(store, hctx, dz.reshape(-1, 1), grads)
        dx = self.features.backward(store, fctx, demb, grads, need_dx=True)
        return loss, grads, dx

    def score(self, store, x):
        """Attack scores in (0,1); 0 = bona fide, 1 = attack."""
        (s,) = _chunked(lambda xb: (nn.sigmoid(self.forward(store, xb)[1]),), x)
        return s

    def embed(self, store, x):
        """128-dim fc128 activations."""
        (e,) = _chunked(lambda xb: (self.forward(store, xb)[0],), x)
        return e


class BranchedNet:
    """Shared trunk + T branches + a 1-dim decision layer over branch scores."""

    kind = "branched"

    def __init__(self, cfg: NetConfig, n_branches, shared_depth=2):
        if not 0 <= shared_depth <= 4:
            raise ValueError(f"shared_depth must be in [0, 4], got {shared_depth}")
        if n_branches < 1:
            raise ValueError("need at least one branch")
        self.cfg = cfg
        self.n_branches = n_branches
        self.shared_depth = shared_depth
        self.trunk = nn.Stack(_conv_block("shared", cfg, 0, shared_depth))
        self.branches = [
            nn.Stack(
                _conv_block(f"branch{t}", cfg, shared_depth, 4)
                + [
                    nn.Dense(f"branch{t}/fc128", cfg.flat_dim, cfg.fc_dim),
                    nn.LeakyReLU(f"branch{t}/Afc"),
                    nn.Dense(f"branch{t}/fc1", cfg.fc_dim, 1),
                ]
            )
            for t in range(n_branches)
        ]
        self.decision = nn.Stack([nn.Dense("decision/fc", n_branches, 1)])
        self._streams = _seed_streams(self, branch_of=_branch_index)

    def param_shapes(self):
        shapes = dict(self.trunk.param_shapes())
        for br in self.branches:
            shapes.update(br.param_shapes())
        shapes.update(self.decision.param_shapes())
        return shapes

    def trunk_param_names(self):
        return sorted(self.trunk.param_shapes())

    def branch_param_names(self, t):
        return sorted(self.branches[t].param_shapes())

    def decision_param_names(self):
        return sorted(self.decision.param_shapes())

    def init_params(self, seed, dtype=np.float32):
        return _init(self, seed, dtype)

    def meta(self):
        return {
            "kind": self.kind,
            "image_size": self.cfg.image_size,
            "channels": self.cfg.channels,
            "n_branches": self.n_branches,
            "shared_depth": self.shared_depth,
        }

    def forward(self, store, x):
        """Full forward; returns (branch_scores NxT, final_score N, trace)."""
        h, trunk_ctx = self.trunk.forward(store, x)
        logits, branch_ctxs = [], []
        for br in self.branches:
            z, ctx = br.forward(store, h)
            logits.append(z.reshape(-1))
            branch_ctxs.append(ctx)
        branch_logits = np.stack(logits, axis=1)
        branch_scores = nn.sigmoid(branch_logits)
        final_logit, dec_ctx = self.decision.forward(store, branch_scores)
        trace = (trunk_ctx, branch_ctxs, dec_ctx, branch_scores)
        return branch_scores, final_logit.reshape(-1), trace

    def score(self, store, x):
        """Returns (final_scores N, branch_scores NxT)."""
        def fn(xb):
            bs, fl, _ = self.forward(store, xb)
            return nn.sigmoid(fl), bs

        return _chunked(fn, x)

    def branch_features(self, store, x):
        """Per-branch 128-dim fc128 activations, shape (N, T, 128)."""

        def fn(xb):
            h, _ = self.trunk.forward(store, xb)
            feats = []
            for br in self.branches:
                a = h
                for layer in br.layers[:-1]:  # stop before fc1
                    a, _ = layer.forward(
                        {k: store[f"{layer.name}/{k}"] for k in layer.param_shapes()}, a
                    )
                feats.append(a)
            return (np.stack(feats, axis=1),)

        (f,) = _chunked(fn, x)
        return f

    def shared_loss_and_grads(self, store, x, targets, grads):
        """BCE on the final decision score; backpropagates everywhere."""
        branch_scores, final_logit, trace = self.forward(store, x)
        trunk_ctx, branch_ctxs, dec_ctx, _ = trace
        loss, dz = nn.bce_with_logits(final_logit, targets)
        dscores = self.decision.backward(store, dec_ctx, dz.reshape(-1, 1), grads)
        dlogits = nn.sigmoid_backward(branch_scores, dscores)
        dh = None
        for t, br in enumerate(self.branches):
            dht = br.backward(
                store,
                branch_ctxs[t],
                dlogits[:, t].reshape(-1, 1),
                grads,
                need_dx=self.shared_depth > 0,
            )
            if self.shared_depth > 0:
                dh = dht if dh is None else dh + dht
        if self.shared_depth > 0:
            self.trunk.backward(store, trunk_ctx, dh, grads, need_dx=False)
        return loss

    def branch_loss_and_grads(self, store, t, x, targets, grads, through_trunk=False):
        """BCE on branch t's own sigmoid score.

        With through_trunk=False (the routed auxiliary loss) the trunk gets no
        gradient contribution; the gradient stops at the branch input.
        """
        h, trunk_ctx = self.trunk.forward(store, x)
        z, ctx = self.branches[t].forward(store, h)
        loss, dz = nn.bce_with_logits(z.reshape(-1), targets)
        need_dh = through_trunk and self.shared_depth > 0
        dh = self.branches[t].backward(
            store, ctx, dz.reshape(-1, 1), grads, need_dx=need_dh
        )
        if need_dh:
            self.trunk.backward(store, trunk_ctx, dh, grads, need_dx=False)
        return loss

    def all_branch_losses_and_grads(self, store, branch_batches, grads,
                                    through_trunk=False):
        """Per-branch BCE for T batches with one fused trunk pass.

        Equivalent to calling branch_loss_and_grads per branch; batching the
        trunk makes the small per-branch batches cheap.  Returns the list of
        branch losses.
        """
        xcat = np.concatenate([x for x, _ in branch_batches], axis=0)
        h, trunk_ctx = self.trunk.forward(store, xcat)
        bounds = np.cumsum([0] + [len(x) for x, _ in branch_batches])
        losses = []
        dhs = []
        need_dh = through_trunk and self.shared_depth > 0
        for t, (x, targets) in enumerate(branch_batches):
            h_t = h[bounds[t] : bounds[t + 1]]
            z, ctx = self.branches[t].forward(store, h_t)
            loss, dz = nn.bce_with_logits(z.reshape(-1), targets)
            dh_t = self.branches[t].backward(
                store, ctx, dz.reshape(-1, 1), grads, need_dx=need_dh
            )
            losses.append(loss)
            if need_dh:
                dhs.append(dh_t)
        if need_dh:
            self.trunk.backward(store, trunk_ctx, np.concatenate(dhs, axis=0),
                                grads, need_dx=False)
        return losses


def _branch_index(name):
    if name.startswith("branch"):
        return int(name.split("/")[0][len("branch") :])
    return 0


def _position_index(name):
    body = name.split("/")[-2]
    if body.startswith("L"):
        return int(body[1:])
    if body == "fc128":
        return 4
    if body == "fc1":
        return 5
    return 6  # decision layer


def _seed_streams(model, branch_of):
    return {
        name: (_INIT_NS, _position_index(name), branch_of(name))
        for name in model.param_shapes()
    }


def _init(model, seed, dtype):
    shapes = model.param_shapes()
    fan_ins = {}
    stacks = [model.features, model.head] if model.kind == "joint" else (
        [model.trunk] + model.branches + [model.decision]
    )
    for stack in stacks:
        for layer in stack.layers:
            for key in layer.param_shapes():
                fan_ins[f"{layer.name}/{key}"] = layer.fan_in()
    return nn.init_stack_params(
        shapes,
        layer_seed_of=lambda name: model._streams[name],
        fan_in_of=lambda name: fan_ins[name],
        seed=seed,
        dtype=dtype,
    )


def param_count(model):
    return sum(int(np.prod(s)) for s in model.param_shapes().values())
