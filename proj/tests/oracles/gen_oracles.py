"""Reference values for the unit tests, computed with numpy / PyTorch in float64.

Run from the repository root to regenerate tests/oracle_values.hpp:
    python3 tests/oracles/gen_oracles.py > tests/oracle_values.hpp
"""
import math

import numpy as np
import torch
import torch.nn.functional as F

torch.set_default_dtype(torch.float64)


def vals(n, seed):
    # Deterministic, RNG-free inputs so the C++ side can rebuild them too.
    return np.array([math.sin(0.37 * i + seed) * (1.0 + 0.1 * (i % 3)) for i in range(n)])


out = ["#pragma once", "", "// Generated by tests/oracles/gen_oracles.py; do not edit by hand.", "",
       "#include <array>", "", "namespace oracle {", ""]


def emit(name, arr):
    flat = np.asarray(arr, dtype=np.float64).ravel()
    body = ", ".join(repr(float(v)) for v in flat)
    out.append(f"inline constexpr std::array<double, {flat.size}> {name}{{{body}}};")


# matmul 4x5 . 5x3
a = vals(20, 1.0).reshape(4, 5)
b = vals(15, 2.0).reshape(5, 3)
emit("kMatmulA", a)
emit("kMatmulB", b)
emit("kMatmulC", a @ b)

# softmax over 7
s = vals(7, 3.0) * 3
emit("kSoftmaxIn", s)
emit("kSoftmaxOut", F.softmax(torch.tensor(s), 0).numpy())

# layer norm over 6 with affine
x = vals(12, 4.0).reshape(2, 6) * 2
g = vals(6, 5.0)
be = vals(6, 6.0)
emit("kLayerNormIn", x)
emit("kLayerNormGamma", g)
emit("kLayerNormBeta", be)
emit("kLayerNormOut", F.layer_norm(torch.tensor(x), (6,), torch.tensor(g), torch.tensor(be), 1e-5).numpy())

# grouped conv: depthwise k=3 pad 1 on (2,4,9), then pointwise 4->3; plus a strided conv with bias
cx = vals(72, 7.0).reshape(2, 4, 9)
dw = vals(12, 8.0).reshape(4, 1, 3)
pw = vals(12, 9.0).reshape(3, 4, 1)
sw = vals(24, 10.0).reshape(2, 4, 3)
sb = vals(2, 11.0)
emit("kConvX", cx)
emit("kConvDepthwise", dw)
emit("kConvPointwise", pw)
d = F.conv1d(torch.tensor(cx), torch.tensor(dw), padding=1, groups=4)
emit("kConvDepthwiseOut", d.numpy())
emit("kConvPointwiseOut", F.conv1d(d, torch.tensor(pw)).numpy())
emit("kConvStridedW", sw)
emit("kConvStridedB", sb)
emit("kConvStridedOut", F.conv1d(torch.tensor(cx), torch.tensor(sw), torch.tensor(sb), stride=2).numpy())

# cross entropy, logits (3,4)
lg = vals(12, 12.0).reshape(3, 4) * 2
tg = [2, 0, 3]
emit("kCrossEntropyLogits", lg)
emit("kCrossEntropyLoss", [F.cross_entropy(torch.tensor(lg), torch.tensor(tg)).item()])

# point-token attention N=5, E=4
q = vals(20, 13.0).reshape(1, 5, 4)
k = vals(20, 14.0).reshape(1, 5, 4)
v = vals(20, 15.0).reshape(1, 5, 4)
emit("kAttnQ", q)
emit("kAttnK", k)
emit("kAttnV", v)
emit("kAttnOut", F.scaled_dot_product_attention(torch.tensor(q), torch.tensor(k), torch.tensor(v)).numpy())
# channel-token attention on the same inputs: tokens are the 4 channels, each an N=5 vector
ft = F.scaled_dot_product_attention(torch.tensor(q).transpose(1, 2), torch.tensor(k).transpose(1, 2),
                                    torch.tensor(v).transpose(1, 2)).transpose(1, 2)
emit("kFeatureAttnOut", ft.numpy())

# point embedding: edges (B=1, C=2, N=3, K=5), E=4, kernel (1,3) stride 1, then max over windows
ed = vals(30, 16.0).reshape(1, 2, 3, 5)
ew = vals(24, 17.0).reshape(4, 2, 1, 3)
eb = vals(4, 18.0)
emb = F.conv2d(torch.tensor(ed), torch.tensor(ew), torch.tensor(eb)).amax(dim=3)
emit("kEmbedEdges", ed)
emit("kEmbedWeight", ew)
emit("kEmbedBias", eb)
emit("kEmbedOut", emb.numpy())
emb2 = F.conv2d(torch.tensor(ed), torch.tensor(ew), torch.tensor(eb), stride=(1, 2)).amax(dim=3)
emit("kEmbedStride2Out", emb2.numpy())

# cosine schedule: lr0 0.01, lr_min 1e-4, 10 epochs
emit("kCosineLr", [1e-4 + 0.5 * (0.01 - 1e-4) * (1 + math.cos(math.pi * e / 10)) for e in range(11)])

# SGD with momentum on a 3-vector, three steps, PyTorch's optimizer
th = torch.tensor(vals(3, 19.0), requires_grad=True)
opt = torch.optim.SGD([th], lr=0.1, momentum=0.9)
th0 = th.detach().clone().numpy()
for step in range(3):
    opt.zero_grad()
    th.grad = torch.tensor(vals(3, 20.0 + step))
    opt.step()
emit("kSgdTheta0", th0)
emit("kSgdTheta3", th.detach().numpy())

out += ["", "}  // namespace oracle", ""]
print("\n".join(out))
