"""The recurrent dueling Q-network.

Per time step::

    costmaps (F, 60, 60) -> conv x3 (ReLU) -> flatten ----------------+
    (rho, phi)  -> FC (ReLU) -> proj --------------------------------+-> LSTM
    (v, omega)  -> FC (ReLU) -> proj --------------------------------+
    LSTM h -> FC (ReLU) -> FC (ReLU) -> value / advantage heads -> dueling Q

With ``recurrent=False`` the LSTM is replaced by a ReLU fully connected layer of
the same width and the recurrent state is passed through unchanged.
Parameters live in a flat ``{name: ndarray}`` dict.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L

N_ACTIONS = 28


@dataclass(frozen=True)
class ArchConfig:
    frames: int = 3
    channels: tuple = (32, 64, 64)
    kernels: tuple = ((8, 4), (4, 2), (3, 1))
    image: int = 60
    proj: int = 64
    hidden: int = 256
    fc: int = 256
    recurrent: bool = True
    n_actions: int = N_ACTIONS
    q_scale: float = 100.0

    @classmethod
    def paper(cls, **kw):
        return cls(**kw)

    @classmethod
    def tiny(cls, **kw):
        base = dict(channels=(8, 16, 16), proj=64, hidden=32, fc=32)
        base.update(kw)
        return cls(**base)

    def conv_shapes(self):
        """Spatial size after each conv layer."""
        sizes, size = [], self.image
        for k, s in self.kernels:
            size = L.conv_output_size(size, k, s)
            sizes.append(size)
        return sizes

    @property
    def conv_features(self) -> int:
        return self.conv_shapes()[-1] ** 2 * self.channels[-1]

    @property
    def core_input(self) -> int:
        return self.conv_features + 2 * self.proj

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["kernels"] = [list(k) for k in self.kernels]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["kernels"] = tuple(tuple(k) for k in d["kernels"])
        return cls(**d)


def param_shapes(arch: ArchConfig) -> dict:
    shapes = {}
    cin = arch.frames
    for i, (cout, (k, _)) in enumerate(zip(arch.channels, arch.kernels), start=1):
        shapes[f"conv{i}/W"] = (cout, cin, k, k)
        shapes[f"conv{i}/b"] = (cout,)
        cin = cout
    shapes["goal/W"] = (arch.proj, 2)
    shapes["goal/b"] = (arch.proj,)
    shapes["vel/W"] = (arch.proj, 2)
    shapes["vel/b"] = (arch.proj,)
    d, hdim = arch.core_input, arch.hidden
    if arch.recurrent:
        shapes["lstm/Wx"] = (d, 4 * hdim)
        shapes["lstm/Wh"] = (hdim, 4 * hdim)
        shapes["lstm/b"] = (4 * hdim,)
    else:
        shapes["core/W"] = (hdim, d)
        shapes["core/b"] = (hdim,)
    shapes["fc1/W"] = (arch.fc, hdim)
    shapes["fc1/b"] = (arch.fc,)
    shapes["fc2/W"] = (arch.fc, arch.fc)
    shapes["fc2/b"] = (arch.fc,)
    shapes["value/W"] = (1, arch.fc)
    shapes["value/b"] = (1,)
    shapes["adv/W"] = (arch.n_actions, arch.fc)
    shapes["adv/b"] = (arch.n_actions,)
    return shapes


def init_params(arch: ArchConfig, seed=0, dtype=np.float32) -> dict:
    """He-normal conv/FC weights, orthogonal LSTM weights, forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith("/b"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name == "lstm/Wx":
            params[name] = L.orthogonal_init(*shape, seed=rng, dtype=dtype)
        elif name == "lstm/Wh":
            h = shape[0]
            params[name] = np.concatenate([L.orthogonal_init(h, h, seed=rng, dtype=dtype) for _ in range(4)], axis=1)
        elif name.startswith(("value/", "adv/")):
            params[name] = (rng.standard_normal(shape) * 0.01).astype(dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = L.he_init(shape, fan_in, rng, dtype)
    if arch.recurrent:
        h = arch.hidden
        params["lstm/b"][h:2 * h] = 1.0
    return params


def prepare_frames(arch: ArchConfig, frames: np.ndarray) -> np.ndarray:
    """Rearrange images (..., H, W) into the first conv layer's block layout
    (..., Hb, Wb, s*s); :func:`forward` accepts stacks of these directly."""
    k1, s1 = arch.kernels[0]
    lead = frames.shape[:-2]
    flat = frames.reshape(-1, 1, *frames.shape[-2:])
    blocks = L.space_to_depth_nchw(flat, k1, s1)
    return blocks.reshape(*lead, *blocks.shape[1:])


def zero_state(arch: ArchConfig, batch: int, dtype=np.float32):
    return (np.zeros((batch, arch.hidden), dtype=dtype), np.zeros((batch, arch.hidden), dtype=dtype))


def check_params(params: dict, arch: ArchConfig) -> None:
    """Raise ``ValueError`` listing every name/shape difference against ``arch``."""
    expected = param_shapes(arch)
    problems = []
    for name, shape in expected.items():
        if name not in params:
            problems.append(f"missing {name} {shape}")
        elif tuple(params[name].shape) != tuple(shape):
            problems.append(f"{name}: checkpoint {tuple(params[name].shape)} != expected {tuple(shape)}")
    problems += [f"unexpected {n}" for n in params if n not in expected]
    if problems:
        raise ValueError("architecture mismatch: " + "; ".join(problems))


def forward(params: dict, arch: ArchConfig, maps, vecs, state, keep_cache: bool = False):
    """Run the network over a sequence.

    ``maps`` is (T, N, frames, H, W): uint8 costmap images (scaled by 1/255
    here) or floats already in [0, 1]; pre-blocked (T, N, frames, Hb, Wb, s*s)
    stacks from :func:`prepare_frames` are also accepted. ``vecs`` is
    (T, N, 4) normalised ``[rho, phi, v, omega]`` and ``state`` an ``(h, c)``
    pair of (N, hidden). Returns ``(Q (T, N, A), state, cache)``.
    """
    t_len, n = maps.shape[:2]
    dtype = params["conv1/W"].dtype
    maps = np.asarray(maps)
    k1, s1 = arch.kernels[0]
    scale = dtype.type(1.0 / 255.0) if maps.dtype == np.uint8 else None
    if maps.ndim == 6:
        # pre-blocked frames from prepare_frames: (T, N, C, Hb, Wb, s*s)
        blocks = maps.transpose(0, 1, 3, 4, 2, 5).reshape(t_len * n, *maps.shape[3:5], -1).astype(dtype)
        if scale is not None:
            blocks *= scale
    else:
        blocks = L.space_to_depth_nchw(maps.reshape(t_len * n, *maps.shape[2:]), k1, s1, dtype, scale)
    size = arch.conv_shapes()[0]
    x, cc = L.conv_forward_blocks(blocks, params["conv1/W"], params["conv1/b"], s1, (size, size))
    x = L.relu(x)
    conv_caches = [(cc, x)]
    for i, (_, stride) in enumerate(arch.kernels[1:], start=2):
        x, cc = L.conv_forward_nhwc(x, params[f"conv{i}/W"], params[f"conv{i}/b"], stride)
        x = L.relu(x)
        conv_caches.append((cc, x))
    feat = x.reshape(t_len * n, -1)
    v = np.asarray(vecs, dtype=dtype).reshape(t_len * n, 4)
    g_in, u_in = v[:, :2], v[:, 2:]
    g = L.relu(L.fully_connected(g_in, params["goal/W"], params["goal/b"]))
    u = L.relu(L.fully_connected(u_in, params["vel/W"], params["vel/b"]))
    core_in = np.concatenate([feat, g, u], axis=1).reshape(t_len, n, -1)

    h, c = state
    hs = np.empty((t_len, n, arch.hidden), dtype=dtype)
    core_caches = []
    if arch.recurrent:
        for t in range(t_len):
            h, c, lc = L.lstm_cell(core_in[t], h, c, params["lstm/Wx"], params["lstm/Wh"], params["lstm/b"])
            hs[t] = h
            core_caches.append(lc)
    else:
        hs[:] = L.relu(L.fully_connected(core_in, params["core/W"], params["core/b"]))
    hflat = hs.reshape(t_len * n, -1)
    f1 = L.relu(L.fully_connected(hflat, params["fc1/W"], params["fc1/b"]))
    f2 = L.relu(L.fully_connected(f1, params["fc2/W"], params["fc2/b"]))
    val = L.fully_connected(f2, params["value/W"], params["value/b"])
    adv = L.fully_connected(f2, params["adv/W"], params["adv/b"])
    q = arch.q_scale * L.dueling_combine(val, adv)
    q = q.reshape(t_len, n, -1)
    cache = None
    if keep_cache:
        cache = dict(shape=(t_len, n), conv=conv_caches, g_in=g_in, u_in=u_in,
                     g=g, u=u, core_in=core_in, core=core_caches, hs=hs, f1=f1, f2=f2)
    return q, (h, c), cache


def backward(params: dict, arch: ArchConfig, cache, dq):
    """Gradients of ``sum(dq * Q)`` with respect to every parameter."""
    t_len, n = cache["shape"]
    grads = {}
    dq = (arch.q_scale * dq).reshape(t_len * n, -1)
    dval, dadv = L.dueling_backward(dq)
    f1, f2 = cache["f1"], cache["f2"]
    df2a, grads["value/W"], grads["value/b"] = L.fully_connected_backward(dval, f2, params["value/W"])
    df2b, grads["adv/W"], grads["adv/b"] = L.fully_connected_backward(dadv, f2, params["adv/W"])
    df2 = L.relu_backward(df2a + df2b, f2)
    df1, grads["fc2/W"], grads["fc2/b"] = L.fully_connected_backward(df2, f1, params["fc2/W"])
    df1 = L.relu_backward(df1, f1)
    hflat = cache["hs"].reshape(t_len * n, -1)
    dh_all, grads["fc1/W"], grads["fc1/b"] = L.fully_connected_backward(df1, hflat, params["fc1/W"])
    dh_all = dh_all.reshape(t_len, n, -1)

    core_in = cache["core_in"]
    if arch.recurrent:
        wx, wh = params["lstm/Wx"], params["lstm/Wh"]
        dcore = np.empty_like(core_in)
        dwx, dwh, db = np.zeros_like(wx), np.zeros_like(wh), np.zeros_like(params["lstm/b"])
        dh_next = np.zeros_like(dh_all[0])
        dc_next = np.zeros_like(dh_all[0])
        for t in reversed(range(t_len)):
            dx, dh_next, dc_next, gwx, gwh, gb = L.lstm_cell_backward(
                dh_all[t] + dh_next, dc_next, cache["core"][t], wx, wh)
            dcore[t] = dx
            dwx += gwx
            dwh += gwh
            db += gb
        grads["lstm/Wx"], grads["lstm/Wh"], grads["lstm/b"] = dwx, dwh, db
    else:
        hs = cache["hs"]
        dpre = L.relu_backward(dh_all, hs)
        dcore, grads["core/W"], grads["core/b"] = L.fully_connected_backward(dpre, core_in, params["core/W"])
    dcore = dcore.reshape(t_len * n, -1)

    nf = arch.conv_features
    dfeat, dg, du = dcore[:, :nf], dcore[:, nf:nf + arch.proj], dcore[:, nf + arch.proj:]
    _, grads["goal/W"], grads["goal/b"] = L.fully_connected_backward(
        L.relu_backward(dg, cache["g"]), cache["g_in"], params["goal/W"])
    _, grads["vel/W"], grads["vel/b"] = L.fully_connected_backward(
        L.relu_backward(du, cache["u"]), cache["u_in"], params["vel/W"])

    dx = dfeat.reshape(cache["conv"][-1][1].shape)
    for i in reversed(range(len(arch.kernels))):
        cc, out = cache["conv"][i]
        dx = L.relu_backward(dx, out)
        dx, grads[f"conv{i + 1}/W"], grads[f"conv{i + 1}/b"] = L.conv_backward_nhwc(dx, cc, need_dx=i > 0)
    return grads


def copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}
