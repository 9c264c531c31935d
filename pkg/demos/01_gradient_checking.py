"""Demo: the autodiff core against finite differences.

Builds a few ops, prints the analytic gradient next to a central-
difference estimate, then checks a whole tiny network end to end.
Run from the repository root:

    python demos/01_gradient_checking.py
"""

import numpy as np

from bagnet.autodiff import Tensor, conv2d, softmax_cross_entropy, weighted_sum
from bagnet.model import BagNetConfig, BlockSpec, build_model, forward_logits


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def main():
    rng = np.random.default_rng(0)

    print("== single op: conv2d weight gradient ==")
    x = rng.standard_normal((1, 2, 6, 6))
    w0 = rng.standard_normal((3, 2, 3, 3))
    probe = rng.standard_normal((1, 3, 4, 4))

    def loss_of(warr):
        out = conv2d(Tensor(x, dtype=np.float64), Tensor(warr, dtype=np.float64))
        return weighted_sum(out, probe).item()

    w = Tensor(w0, requires_grad=True, dtype=np.float64)
    out = weighted_sum(conv2d(Tensor(x, dtype=np.float64), w), probe)
    out.backward()
    numeric = central_diff(loss_of, w0.copy())
    print(f"  max |analytic - numeric| = {np.abs(w.grad - numeric).max():.3e}")

    print("== full network: every parameter of a tiny model ==")
    cfg = BagNetConfig(q=5, stem=(3, 1, 0, 4), blocks=(BlockSpec(4, 2, 8, 3, 2),),
                       num_classes=3, input_size=11, feature_dim=8)
    data = rng.standard_normal((2, 3, 11, 11))
    labels = np.array([0, 2])

    def fresh():
        m = build_model(cfg, seed=7)
        # realistic running stats: at the zero-init point (beta = running
        # mean = 0) dead pixels put pre-relu values exactly on the kink,
        # where the loss itself is not differentiable
        stats_rng = np.random.default_rng(5)
        for st in m.bn.values():
            st.running_mean = stats_rng.normal(0, 0.3, st.running_mean.shape).astype(np.float32)
            st.running_var = (1 + stats_rng.uniform(-0.3, 0.5, st.running_var.shape)).astype(np.float32)
        for p in m.params.values():
            p.value = Tensor(p.value.data.astype(np.float64), requires_grad=True,
                             dtype=np.float64)
        return m.eval_mode()

    model = fresh()
    loss = softmax_cross_entropy(forward_logits(model, Tensor(data, dtype=np.float64)), labels)
    loss.backward()
    print(f"  loss = {loss.item():.4f}")
    worst = 0.0
    for name, p in model.params.items():
        def f(arr, _n=name):
            m = fresh()
            m.params[_n].value.data = arr.copy()
            return softmax_cross_entropy(
                forward_logits(m, Tensor(data, dtype=np.float64)), labels).item()

        numeric = central_diff(f, p.value.data.copy())
        err = np.abs(p.value.grad - numeric).max()
        worst = max(worst, err)
        print(f"  {name:26s} max abs gap {err:.2e}")
    print(f"  worst gap across all parameters: {worst:.2e}")


if __name__ == "__main__":
    main()
