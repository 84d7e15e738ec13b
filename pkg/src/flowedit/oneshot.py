"""One-shot flow prediction: an encoder-decoder that emits the spatial field
directly and a hypernetwork that emits the color-field MLP parameters.

The prompt conditions the network through cross-attention at the bottleneck:
queries come from flattened image features, keys/values from the prompt
embedding. Training is unsupervised — the same total objective as iterative
editing, so no (text, field) pairs are ever needed. Everything here runs at
toy scale (small widths, small images); the mechanism is the point.
"""

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import inr, losses, warp
from . import tensor as T
from .losses import LossWeights
from .optimize import Adam

OSN_MAGIC = b"OSN1"


@dataclass
class OneShotConfig:
    """Architecture: 3 stride-2 downsamples, 2 residual blocks per level,
    bottleneck cross-attention, symmetric nearest-upsample decoder."""

    widths: tuple = (16, 32, 32, 64)
    heads: int = 2
    head_width: int = 32
    text_dim: int = 64
    fc_dims: tuple = (18, 16, 16, 1)
    encode_levels: int = 4
    seed: int = 0

    def validate(self):
        if len(self.widths) != 4:
            raise ValueError(f"need 4 level widths, got {self.widths}")
        if self.heads * self.head_width != self.widths[-1]:
            raise ValueError(
                f"heads*head_width ({self.heads}*{self.head_width}) must equal "
                f"bottleneck width {self.widths[-1]}"
            )
        if self.fc_dims[0] != inr.encoding_width(self.encode_levels):
            raise ValueError(
                f"color-field input {self.fc_dims[0]} does not match encoding "
                f"width {inr.encoding_width(self.encode_levels)}"
            )
        return self


def _glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _conv_init(rng, o, c, k):
    return _glorot(rng, (o, c, k, k), c * k * k, o * k * k)


class OneShotNet:
    """Parameter container plus the forward pass. Parameters live in an
    ordered dict of leaf tensors so the optimizer and the checkpoint format
    see one canonical ordering."""

    def __init__(self, config):
        self.config = config.validate()
        self.params = {}
        rng = np.random.default_rng(config.seed)
        w = config.widths

        self._add("stem.w", _conv_init(rng, w[0], 3, 3))
        self._add("stem.b", np.zeros(w[0], np.float32))
        for lv in range(4):
            c = w[lv]
            if lv > 0:
                self._add(f"down{lv}.w", _conv_init(rng, c, w[lv - 1], 3))
                self._add(f"down{lv}.b", np.zeros(c, np.float32))
            for blk in range(2):
                for cv in (1, 2):
                    self._add(f"enc{lv}.res{blk}.conv{cv}.w", _conv_init(rng, c, c, 3))
                    self._add(f"enc{lv}.res{blk}.conv{cv}.b", np.zeros(c, np.float32))

        d = w[3]
        self._add("attn.wq", _glorot(rng, (d, d), d, d))
        self._add("attn.wk", _glorot(rng, (config.text_dim, d), config.text_dim, d))
        self._add("attn.wv", _glorot(rng, (config.text_dim, d), config.text_dim, d))

        for lv in (2, 1, 0):
            cin, cout = w[lv + 1], w[lv]
            self._add(f"up{lv}.w", _conv_init(rng, cout, cin, 3))
            self._add(f"up{lv}.b", np.zeros(cout, np.float32))
            self._add(f"merge{lv}.w", _conv_init(rng, cout, 2 * cout, 3))
            self._add(f"merge{lv}.b", np.zeros(cout, np.float32))
            for blk in range(2):
                for cv in (1, 2):
                    self._add(f"dec{lv}.res{blk}.conv{cv}.w", _conv_init(rng, cout, cout, 3))
                    self._add(f"dec{lv}.res{blk}.conv{cv}.b", np.zeros(cout, np.float32))

        # zero-initialized heads: a fresh network predicts the identity edit
        self._add("flow_head.w", np.zeros((2, w[0], 3, 3), np.float32))
        self._add("flow_head.b", np.zeros(2, np.float32))

        n_theta = inr.param_count(list(config.fc_dims))
        self._add("hyper.w1", _glorot(rng, (d, 256), d, 256))
        self._add("hyper.b1", np.zeros(256, np.float32))
        self._add("hyper.w2", _glorot(rng, (256, 256), 256, 256))
        self._add("hyper.b2", np.zeros(256, np.float32))
        self._add("hyper.w3", np.zeros((256, n_theta), np.float32))
        self._add("hyper.b3", np.zeros(n_theta, np.float32))

    def _add(self, name, value):
        self.params[name] = T.Tensor(value, requires_grad=True)

    def param_list(self):
        return list(self.params.values())

    def param_groups(self):
        groups = {"encoder": [], "attention": [], "decoder": [], "hypernetwork": []}
        for name, p in self.params.items():
            if name.startswith(("stem", "enc", "down")):
                groups["encoder"].append(p)
            elif name.startswith("attn"):
                groups["attention"].append(p)
            elif name.startswith(("up", "merge", "dec", "flow_head")):
                groups["decoder"].append(p)
            else:
                groups["hypernetwork"].append(p)
        return groups

    def _res_block(self, x, prefix):
        p = self.params
        h = T.relu(T.conv2d(x, p[f"{prefix}.conv1.w"], bias=p[f"{prefix}.conv1.b"]))
        h = T.conv2d(h, p[f"{prefix}.conv2.w"], bias=p[f"{prefix}.conv2.b"])
        return T.relu(T.add(h, x))

    def forward(self, image, text_embedding, return_attention=False):
        """Predict (spatial field, color-field parameters, color field).

        image is (H,W,3) with H, W divisible by 8; text_embedding is the
        prompt vector from the guidance model. Fully differentiable w.r.t.
        every network parameter.
        """
        image = np.asarray(image, dtype=np.float32)
        h, w = image.shape[:2]
        if h % 8 or w % 8:
            raise ValueError(f"image dims must be divisible by 8, got {h}x{w}")
        text_embedding = np.asarray(text_embedding, dtype=np.float32).reshape(-1)
        if text_embedding.size != self.config.text_dim:
            raise ValueError(
                f"text embedding has {text_embedding.size} dims, network "
                f"expects {self.config.text_dim}"
            )
        p = self.params

        x = T.Tensor(np.ascontiguousarray(image.transpose(2, 0, 1)))
        x = T.relu(T.conv2d(x, p["stem.w"], bias=p["stem.b"]))
        skips = []
        for lv in range(4):
            if lv > 0:
                x = T.relu(T.conv2d(x, p[f"down{lv}.w"], stride=2, bias=p[f"down{lv}.b"]))
            for blk in range(2):
                x = self._res_block(x, f"enc{lv}.res{blk}")
            if lv < 3:
                skips.append(x)

        d = self.config.widths[3]
        hb, wb = x.data.shape[1], x.data.shape[2]
        tokens = T.transpose(T.reshape(x, (d, hb * wb)))
        attended, attn = cross_attention(
            tokens, text_embedding, p["attn.wq"], p["attn.wk"], p["attn.wv"],
            self.config.heads,
        )

        pooled = T.reshape(T.reduce_mean(attended, axis=0), (1, d))
        hidden = T.relu(T.linear(pooled, p["hyper.w1"], p["hyper.b1"]))
        hidden = T.relu(T.linear(hidden, p["hyper.w2"], p["hyper.b2"]))
        theta_c = T.reshape(T.linear(hidden, p["hyper.w3"], p["hyper.b3"]), (-1,))
        color_field = inr.inr_forward_graph(
            list(self.config.fc_dims), self.config.encode_levels, theta_c, h, w, 1.0
        )

        y = T.reshape(T.transpose(attended), (d, hb, wb))
        for lv in (2, 1, 0):
            y = T.nearest_upsample(y, 2)
            y = T.relu(T.conv2d(y, p[f"up{lv}.w"], bias=p[f"up{lv}.b"]))
            y = T.concat([y, skips[lv]], axis=0)
            y = T.relu(T.conv2d(y, p[f"merge{lv}.w"], bias=p[f"merge{lv}.b"]))
            for blk in range(2):
                y = self._res_block(y, f"dec{lv}.res{blk}")
        flow = T.permute(T.conv2d(y, p["flow_head.w"], bias=p["flow_head.b"]), (1, 2, 0))

        if return_attention:
            return flow, theta_c, color_field, attn
        return flow, theta_c, color_field


def cross_attention(tokens, text_embedding, wq, wk, wv, heads):
    """Scaled dot-product cross-attention with a residual connection.

    Queries from image tokens (N,d); keys/values from the prompt embedding
    (one or more tokens of width text_dim). Returns the attended tokens and
    the attention weights (heads, N, T) for inspection.
    """
    tokens = T.as_tensor(tokens)
    d = tokens.data.shape[1]
    if d != wq.data.shape[0] or d % heads:
        raise ValueError(
            f"token width {d} incompatible with Wq {wq.data.shape} and {heads} heads"
        )
    text = np.asarray(text_embedding, dtype=np.float32)
    if text.ndim == 1:
        text = text.reshape(1, -1)
    if text.shape[1] != wk.data.shape[0]:
        raise ValueError(
            f"text width {text.shape[1]} does not match Wk input {wk.data.shape[0]}"
        )
    head_width = d // heads

    q = T.matmul(tokens, wq)
    text_t = T.Tensor(text)
    k = T.matmul(text_t, wk)
    v = T.matmul(text_t, wv)

    outs = []
    weights = []
    scale = 1.0 / np.sqrt(head_width)
    for hd in range(heads):
        sl = slice(hd * head_width, (hd + 1) * head_width)
        scores = T.mul(T.matmul(q[:, sl], T.transpose(k[:, sl])), scale)
        attn = T.softmax(scores)
        weights.append(attn.data.copy())
        outs.append(T.matmul(attn, v[:, sl]))
    out = T.add(T.concat(outs, axis=-1), tokens)
    return out, np.stack(weights)


@dataclass
class OneShotTrainConfig:
    """Unsupervised training loop settings (Adam, epoch-based lr halving)."""

    epochs: int = 100
    lr: float = 1e-4
    halve_every_epochs: int = 10
    weights: LossWeights = dc_field(
        default_factory=lambda: LossWeights(clip=10.0, sm=10.0, reg=0.0, color=10.0, id=0.1)
    )
    blur_kernel: int = 51
    alpha: float = 1.0
    seed: int = 0
    net: OneShotConfig = dc_field(default_factory=OneShotConfig)


def effective_fields(net_outputs, blur_kernel, alpha):
    """Post-process predicted fields: blur+scale the rasterized spatial field;
    the color field comes from an MLP (already smooth) so it is only scaled."""
    flow, theta_c, color_field = net_outputs[:3]
    flow_eff = warp.smooth_and_scale(flow, blur_kernel, alpha)
    cflow_eff = T.mul(color_field, float(alpha))
    return flow_eff, cflow_eff


def train_oneshot(images, prompts, guidance, config):
    """Fit the network on (image, randomly paired prompt) samples.

    Returns the trained net and a per-step trace. lr halves every
    ``halve_every_epochs`` epochs; one epoch is one shuffled pass over the
    images.
    """
    images = [np.asarray(im, dtype=np.float32) for im in images]
    if not images:
        raise ValueError("training needs at least one image")
    if not prompts:
        raise ValueError("training needs at least one prompt")
    net = OneShotNet(config.net)
    text_vectors = {p: np.asarray(guidance.embed_prompt(p), np.float32) for p in prompts}
    for p, vec in text_vectors.items():
        if vec.size != config.net.text_dim:
            raise ValueError(
                f"guidance embeds prompts with {vec.size} dims but the network "
                f"expects {config.net.text_dim}"
            )

    steps_per_epoch = len(images)
    adam = Adam(
        net.param_list(),
        config.lr,
        halve_every=config.halve_every_epochs * steps_per_epoch,
    )
    rng = np.random.default_rng(config.seed)
    embedder = losses.RandomProjectionEmbedder()
    trace = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        for idx in order:
            image = images[idx]
            prompt = prompts[rng.integers(len(prompts))]
            outputs = net.forward(image, text_vectors[prompt])
            flow_eff, cflow_eff = effective_fields(outputs, config.blur_kernel, config.alpha)
            total, parts, _ = losses.total_loss(
                image, prompt, flow_eff, cflow_eff, config.weights, guidance,
                embedder=embedder,
            )
            parts["epoch"] = epoch
            parts["lr"] = adam.current_lr()
            trace.append(parts)
            total.backward()
            adam.step()
            adam.zero_grad()
    return net, trace


# -- checkpoint format ---------------------------------------------------------

def save_oneshot(path, net):
    """OSN1 checkpoint: architecture header then all parameters, f32 LE, in
    the network's canonical parameter order."""
    cfg = net.config
    flat = np.concatenate([p.data.reshape(-1) for p in net.param_list()])
    with open(path, "wb") as f:
        f.write(OSN_MAGIC)
        f.write(struct.pack("<I", len(cfg.widths)))
        f.write(struct.pack(f"<{len(cfg.widths)}I", *cfg.widths))
        f.write(struct.pack("<III", cfg.heads, cfg.head_width, cfg.text_dim))
        f.write(struct.pack("<II", cfg.encode_levels, len(cfg.fc_dims)))
        f.write(struct.pack(f"<{len(cfg.fc_dims)}I", *cfg.fc_dims))
        f.write(struct.pack("<I", flat.size))
        f.write(flat.astype("<f4").tobytes())


def load_oneshot(path):
    with open(path, "rb") as f:
        if f.read(4) != OSN_MAGIC:
            raise ValueError(f"{path}: not an OSN1 checkpoint")
        (nw,) = struct.unpack("<I", f.read(4))
        widths = struct.unpack(f"<{nw}I", f.read(4 * nw))
        heads, head_width, text_dim = struct.unpack("<III", f.read(12))
        levels, nfc = struct.unpack("<II", f.read(8))
        fc_dims = struct.unpack(f"<{nfc}I", f.read(4 * nfc))
        (n_params,) = struct.unpack("<I", f.read(4))
        flat = np.frombuffer(f.read(n_params * 4), dtype="<f4")
    if flat.size != n_params:
        raise ValueError(f"{path}: truncated OSN1 checkpoint")
    cfg = OneShotConfig(
        widths=tuple(widths), heads=heads, head_width=head_width,
        text_dim=text_dim, fc_dims=tuple(fc_dims), encode_levels=levels,
    )
    net = OneShotNet(cfg)
    expected = sum(p.data.size for p in net.param_list())
    if flat.size != expected:
        raise ValueError(
            f"{path}: checkpoint has {flat.size} parameters, architecture "
            f"header implies {expected}"
        )
    off = 0
    for p in net.param_list():
        n = p.data.size
        p.data = flat[off : off + n].reshape(p.data.shape).astype(np.float32)
        off += n
    return net
