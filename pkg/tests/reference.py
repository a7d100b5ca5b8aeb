"""Independent scalar-loop reference implementations.

Pure-Python (math/cmath only, no numpy) re-derivations of the recurrent
cells, the attention step, the conv stack and the full forward pass, written
directly from the defining equations.  They exist to cross-check the
vectorized implementations; keeping them numpy-free keeps the two code paths
independent.

All functions accept complex inputs so that complex-step differentiation
(grad f = Im f(x + ih)/h, exact to machine precision for analytic paths) can
serve as a near-exact gradient oracle.
"""

from __future__ import annotations

import cmath


def sig(x):
    return 1.0 / (1.0 + cmath.exp(-x))


def tanh(x):
    return cmath.tanh(x)


def relu(x):
    return x if x.real > 0 else 0.0 * x


def matvec(m, v):
    return [sum(mi[j] * v[j] for j in range(len(v))) for mi in m]


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def ref_lstm_cell(x, h_prev, c_prev, w, tied=False):
    """Gates from sigmoids of affine maps of [h_prev, x]; candidate via tanh."""
    z = list(h_prev) + list(x)
    i = [sig(v + b) for v, b in zip(matvec(w["Wi"], z), w["bi"])]
    f = [sig(v + b) for v, b in zip(matvec(w["Wf"], z), w["bf"])]
    o = [sig(v + b) for v, b in zip(matvec(w["Wo"], z), w["bo"])]
    wc, bc = (w["Wi"], w["bi"]) if tied else (w["Wc"], w["bc"])
    cand = [tanh(v + b) for v, b in zip(matvec(wc, z), bc)]
    c = [f[k] * c_prev[k] + i[k] * cand[k] for k in range(len(h_prev))]
    h = [tanh(c[k]) * o[k] for k in range(len(h_prev))]
    return h, c


def ref_gru_cell(x, h_prev, w):
    z_in = list(h_prev) + list(x)
    gz = [sig(v + b) for v, b in zip(matvec(w["Wz"], z_in), w["bz"])]
    gr = [sig(v + b) for v, b in zip(matvec(w["Wr"], z_in), w["br"])]
    r_in = [gr[k] * h_prev[k] for k in range(len(h_prev))] + list(x)
    cand = [tanh(v + b) for v, b in zip(matvec(w["Wh"], r_in), w["bh"])]
    return [(1 - gz[k]) * h_prev[k] + gz[k] * cand[k] for k in range(len(h_prev))]


def ref_rnn_cell(x, h_prev, w, b):
    z = list(h_prev) + list(x)
    return [tanh(v + bb) for v, bb in zip(matvec(w, z), b)]


def ref_attention(h_dec, c_dec, enc_states, v, w_a, u_a, b_a):
    """Scores via the concatenation form, softmax over encoder steps,
    context as the weighted sum of encoder hidden states."""
    z = list(h_dec) + list(c_dec)
    wz = matvec(w_a, z)
    lams = []
    for h_enc in enc_states:
        uh = matvec(u_a, h_enc)
        s = [tanh(wz[k] + uh[k] + b_a[k]) for k in range(len(b_a))]
        lams.append(dot(v, s))
    # constant shift cancels identically in the ratio
    shift = max(l.real if isinstance(l, complex) else l for l in lams)
    exps = [cmath.exp(l - shift) for l in lams]
    total = sum(exps)
    gamma = [e / total for e in exps]
    d = len(enc_states[0])
    ctx = [sum(gamma[t] * enc_states[t][k] for t in range(len(enc_states)))
           for k in range(d)]
    return ctx, gamma


def ref_conv_layer(x, w, b, same):
    """x: [h][w][cin], w: [kh][kw][cin][cout]. relu activation."""
    h, wd, cin = len(x), len(x[0]), len(x[0][0])
    kh, kw = len(w), len(w[0])
    cout = len(w[0][0][0])
    if same:
        ph, pw = kh // 2, kw // 2
        ho, wo = h, wd
    else:
        ph = pw = 0
        ho, wo = h - kh + 1, wd - kw + 1
    out = [[[None] * cout for _ in range(wo)] for _ in range(ho)]
    for i in range(ho):
        for j in range(wo):
            for co in range(cout):
                acc = b[co]
                for u in range(kh):
                    for vv in range(kw):
                        ii = i + u - ph
                        jj = j + vv - pw
                        if 0 <= ii < h and 0 <= jj < wd:
                            for ci in range(cin):
                                acc += x[ii][jj][ci] * w[u][vv][ci][co]
                out[i][j][co] = relu(acc)
    return out


def ref_maxpool(x):
    """2x2 stride-2 floor pooling, argmax by real part."""
    h, wd, c = len(x), len(x[0]), len(x[0][0])
    ho, wo = h // 2, wd // 2
    out = [[[None] * c for _ in range(wo)] for _ in range(ho)]
    for i in range(ho):
        for j in range(wo):
            for ch in range(c):
                vals = [x[2 * i][2 * j][ch], x[2 * i][2 * j + 1][ch],
                        x[2 * i + 1][2 * j][ch], x[2 * i + 1][2 * j + 1][ch]]
                best = vals[0]
                for vv in vals[1:]:
                    if vv.real > best.real:
                        best = vv
                out[i][j][ch] = best
    return out


def ref_cnn(h_map, params, conv_spec):
    """Conv stack ('same' for odd kernels, 'valid' for even), pool after all
    layers but the last, flatten, affine to a scalar."""
    x = h_map
    n_layers = len(conv_spec)
    for li, (kh, kw, cout) in enumerate(conv_spec):
        x = ref_conv_layer(x, params[f"conv{li}_w"], params[f"conv{li}_b"],
                           same=(kh % 2 == 1))
        if li < n_layers - 1:
            x = ref_maxpool(x)
    flat = [v for row in x for cell in row for v in cell]
    return dot(flat, params["cnn_out_w"]) + params["cnn_out_b"][0]


def _cell_weights(params, prefix, tied):
    w = {"Wi": params[f"{prefix}_Wi"], "bi": params[f"{prefix}_bi"],
         "Wf": params[f"{prefix}_Wf"], "bf": params[f"{prefix}_bf"],
         "Wo": params[f"{prefix}_Wo"], "bo": params[f"{prefix}_bo"]}
    if not tied:
        w["Wc"] = params[f"{prefix}_Wc"]
        w["bc"] = params[f"{prefix}_bc"]
    return w


def ref_forward(params, heatmaps, usage, externals, conv_spec, d,
                tied=False, encoder_externals=False, decoder_init="encoder"):
    """Full single-window forward pass; mirrors the model contract:
    per-step input [cnn scalar, usage pair], one decoder step on
    [context, target externals], affine readout to two outputs."""
    tt = len(usage)
    h = [0.0] * d
    c = [0.0] * d
    enc_states = []
    for t in range(tt):
        cnn_t = ref_cnn(heatmaps[t], params, conv_spec)
        x = [cnn_t, usage[t][0], usage[t][1]]
        if encoder_externals:
            x += list(externals[t])
        h, c = ref_lstm_cell(x, h, c, _cell_weights(params, "enc", tied), tied)
        enc_states.append(h)
    if decoder_init == "encoder":
        h0d, c0d = h, c
    else:
        h0d, c0d = [0.0] * d, [0.0] * d
    ctx, _ = ref_attention(h0d, c0d, enc_states, params["att_v"],
                           params["att_W"], params["att_U"], params["att_b"])
    x_dec = list(ctx) + list(externals[tt])
    h_dec, _ = ref_lstm_cell(x_dec, h0d, c0d,
                             _cell_weights(params, "dec", tied), tied)
    return [dot(params["out_w"][0], h_dec) + params["out_b"][0],
            dot(params["out_w"][1], h_dec) + params["out_b"][1]]


def ref_loss(params, heatmaps, usage, externals, target, conv_spec, d,
             **kw):
    p = ref_forward(params, heatmaps, usage, externals, conv_spec, d, **kw)
    return ((p[0] - target[0]) ** 2 + (p[1] - target[1]) ** 2) / 2.0


def complex_step_grad(loss_fn, params, name, index, h=1e-20):
    """d(loss)/d(params[name][index...]) via a complex perturbation."""
    import copy
    perturbed = copy.deepcopy(params)
    ref = perturbed[name]
    idx = list(index)
    while len(idx) > 1:
        ref = ref[idx.pop(0)]
    ref[idx[0]] = ref[idx[0]] + 1j * h
    return loss_fn(perturbed).imag / h
