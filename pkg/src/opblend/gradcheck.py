"""Central finite-difference verification of every backward rule.

Each case builds a scalar objective from float64 inputs twice: once on a
tape for analytic gradients, and once per perturbed element for numeric
differences. Objectives project the op output against a fixed random field
before summing, so transposed or misplaced gradients cannot cancel out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import blocks
from .metrics import LossConfig, smoothing_loss

__all__ = ["CheckResult", "check_case", "default_cases", "run_suite"]

STEP = 1e-3
TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool

    def line(self) -> str:
        return f"{'ok  ' if self.passed else 'FAIL'} {self.name}: max rel err {self.max_rel_err:.3e}"


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def check_case(build, arrays, rng, max_elems=6, step=STEP, tol=TOLERANCE) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build(tensors) -> scalar Tensor`` where ``tensors`` maps the names in
    ``arrays`` to Tensor objects (possibly on a tape). For big parameters a
    random subset of ``max_elems`` elements per array is probed.
    """
    tape = ad.GradTape()
    tensors = {k: ad.Tensor(v, tape=tape) for k, v in arrays.items()}
    loss = build(tensors)
    tape.backward(loss)
    grads = {k: tape.grad(t) for k, t in tensors.items()}

    def value(override_name, override_arr) -> float:
        ts = {
            k: ad.Tensor(override_arr if k == override_name else v)
            for k, v in arrays.items()
        }
        return build(ts).item()

    worst = 0.0
    for name, arr in arrays.items():
        n = arr.size
        if n <= max_elems:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=max_elems, replace=False)
        for i in idx:
            up = arr.copy()
            up.flat[i] += step
            dn = arr.copy()
            dn.flat[i] -= step
            numeric = (value(name, up) - value(name, dn)) / (2.0 * step)
            worst = max(worst, _rel_err(float(grads[name].flat[i]), numeric))
    return worst


def _projected(out: ad.Tensor, rng) -> ad.Tensor:
    proj = ad.Tensor(rng.standard_normal(out.shape))
    return ad.sum_all(ad.mul(out, proj))


def _rand(rng, shape, scale=1.0):
    return scale * rng.standard_normal(shape)


def _away_from(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * gap + (x == 0) * gap


def _dsa_arrays(rng, c):
    arrays = {}
    for i in (1, 2, 3, 4):
        arrays[f"w{i}l"] = _rand(rng, (c, c, 3, 3), 0.4)
        arrays[f"w{i}r"] = _rand(rng, (c, c, 3, 3), 0.4)
        arrays[f"b{i}"] = _rand(rng, (1, c, 1, 1), 0.2)
    return arrays


def _dsa_from(t, prefix=""):
    return blocks.DsaParams(*(t[f"{prefix}{k}"] for k in (
        "w1l", "w1r", "b1", "w2l", "w2r", "b2", "w3l", "w3r", "b3", "w4l", "w4r", "b4")))


def default_cases(seed: int = 0):
    """(name, build, arrays) triples covering every op and block."""
    master = np.random.default_rng(seed)
    cases = []

    def case(name, make):
        rng = np.random.default_rng([seed, len(cases)])
        build, arrays = make(rng)
        cases.append((name, build, arrays, rng))

    def conv_case(stride, dilation, padding):
        def make(rng):
            arrays = {
                "x": _rand(rng, (2, 3, 7, 6)),
                "w": _rand(rng, (4, 3, 3, 3), 0.4),
                "b": _rand(rng, (1, 4, 1, 1), 0.2),
            }

            def build(t):
                out = ad.conv2d(t["x"], t["w"], t["b"], stride, dilation, padding)
                return _projected(out, np.random.default_rng([seed, 999, stride, dilation]))

            return build, arrays

        return make

    case("conv2d", conv_case(1, 1, 1))
    case("conv2d_strided", conv_case(2, 1, 2))
    case("conv2d_dilated", conv_case(1, 2, 2))

    def make_convt(rng):
        arrays = {
            "x": _rand(rng, (2, 3, 4, 5)),
            "w": _rand(rng, (3, 2, 4, 4), 0.4),
            "b": _rand(rng, (1, 2, 1, 1), 0.2),
        }

        def build(t):
            out = ad.conv_transpose2d(t["x"], t["w"], t["b"], stride=2, padding=1, out_hw=(8, 10))
            return _projected(out, np.random.default_rng([seed, 998]))

        return build, arrays

    case("conv_transpose2d", make_convt)

    for kind in ("lrelu", "tanh", "sigmoid"):
        def make_act(rng, kind=kind):
            arrays = {"x": _away_from(rng, (1, 2, 4, 4))}

            def build(t):
                return _projected(ad.activation(t["x"], kind), np.random.default_rng([seed, 997]))

            return build, arrays

        case(kind, make_act)

    def make_binary(kind):
        def make(rng):
            arrays = {"a": _rand(rng, (1, 2, 3, 4)), "b": _rand(rng, (1, 2, 3, 4))}

            def build(t):
                return _projected(ad.elementwise(t["a"], t["b"], kind), np.random.default_rng([seed, 996]))

            return build, arrays

        return make

    case("add", make_binary("add"))
    case("mul", make_binary("mul"))

    def make_affine(rng):
        arrays = {"x": _rand(rng, (1, 2, 3, 3))}

        def build(t):
            return _projected(ad.affine(t["x"], -1.7, 0.3), np.random.default_rng([seed, 995]))

        return build, arrays

    case("affine", make_affine)

    def make_abs(rng):
        arrays = {"x": _away_from(rng, (1, 2, 4, 4))}

        def build(t):
            return _projected(ad.absval(t["x"]), np.random.default_rng([seed, 994]))

        return build, arrays

    case("abs", make_abs)

    def make_recip(rng):
        arrays = {"x": 0.5 + np.abs(_rand(rng, (1, 2, 4, 4)))}

        def build(t):
            return _projected(ad.reciprocal(t["x"]), np.random.default_rng([seed, 993]))

        return build, arrays

    case("reciprocal", make_recip)

    def make_concat(rng):
        arrays = {"a": _rand(rng, (1, 2, 4, 4)), "b": _rand(rng, (1, 3, 4, 4))}

        def build(t):
            return _projected(ad.concat_channels([t["a"], t["b"]]), np.random.default_rng([seed, 992]))

        return build, arrays

    case("concat_channels", make_concat)

    def make_sum(rng):
        arrays = {"x": _rand(rng, (2, 2, 3, 3))}

        def build(t):
            return ad.sum_all(t["x"])

        return build, arrays

    case("sum", make_sum)

    def make_dsa(rng):
        c = 2
        arrays = _dsa_arrays(rng, c)
        arrays["s0"] = _rand(rng, (1, c, 5, 5))
        arrays["s1"] = _rand(rng, (1, c, 5, 5))

        def build(t):
            out = blocks.dsa_forward(_dsa_from(t), t["s0"], t["s1"])
            return _projected(out, np.random.default_rng([seed, 991]))

        return build, arrays

    case("dsa_module", make_dsa)

    def make_res_dsa(rng):
        c = 2
        arrays = _dsa_arrays(rng, c)
        arrays.update(
            ca_w=_rand(rng, (c, c, 3, 3), 0.4),
            ca_b=_rand(rng, (1, c, 1, 1), 0.2),
            cb_w=_rand(rng, (c, c, 3, 3), 0.4),
            cb_b=_rand(rng, (1, c, 1, 1), 0.2),
            x=_rand(rng, (1, c, 6, 6)),
        )

        def build(t):
            blk = blocks.ResDsaBlock(
                blocks.ConvParams(t["ca_w"], t["ca_b"]),
                blocks.ConvParams(t["cb_w"], t["cb_b"]),
                _dsa_from(t),
            )
            return _projected(blocks.res_dsa_forward(blk, t["x"]), np.random.default_rng([seed, 990]))

        return build, arrays

    case("res_dsa", make_res_dsa)

    def make_msac(rng):
        c = 2
        cfg = blocks.DsanConfig(channels=c, in_channels=1)
        # reuse only the first MSAC block of the layout
        layout = [(n, s) for n, s in blocks.dsan_param_layout(cfg) if n.startswith("nla.msac1.")]
        arrays = {}
        for name, shape in layout:
            kind = "bias" if name.rsplit(".", 1)[-1].startswith("b") else "weight"
            arrays[name] = _rand(rng, shape, 0.4 if kind == "weight" else 0.1)
        arrays["x"] = _rand(rng, (1, c, 9, 9))

        def build(t):
            sub = {n.removeprefix("nla.msac1."): t[n] for n, _ in layout}

            def conv(prefix):
                return blocks.ConvParams(sub[f"{prefix}.w"], sub[f"{prefix}.b"])

            def pcan(prefix):
                return blocks.PcanBlock(conv(f"{prefix}.d1"), conv(f"{prefix}.d4"), conv(f"{prefix}.d8"), conv(f"{prefix}.fuse"))

            blk = blocks.MsacBlock(
                pcan("pcan1"), pcan("pcan2"), pcan("pcan3"),
                conv("rearrange1"), conv("rearrange2"), conv("rearrange3"), conv("shrink"),
            )
            return _projected(blocks.msac_forward(blk, t["x"]), np.random.default_rng([seed, 989]))

        return build, arrays

    case("msac", make_msac)

    def make_dsan(rng):
        cfg = blocks.DsanConfig(channels=4, in_channels=1)
        ps = blocks.init_dsan_params(cfg, seed=int(master.integers(1 << 31)))
        arrays = {}
        for name, arr in ps.entries:
            kind = "bias" if name.rsplit(".", 1)[-1].startswith("b") else "weight"
            jitter = _rand(rng, arr.shape, 0.05 if kind == "bias" else 0.0)
            arrays[name] = arr.astype(np.float64) + jitter

        arrays["__input__"] = 0.5 + 0.25 * rng.standard_normal((1, 1, 8, 8))

        def build(t):
            model_entries = []

            def make_param(name, shape, kind):
                tt = t[name]
                model_entries.append((name, tt))
                return tt

            fields = blocks._build_dsan(cfg, make_param)
            model = blocks.DsanModel(config=cfg, entries=tuple(model_entries), **fields)
            out = blocks.dsan_forward(model, t["__input__"])
            return _projected(out, np.random.default_rng([seed, 987]))

        return build, arrays

    case("dsan_8x8", make_dsan)

    def make_loss(rng):
        arrays = {
            "pred": 0.5 + 0.2 * rng.standard_normal((1, 1, 8, 8)),
            "label": 0.5 + 0.2 * rng.standard_normal((1, 1, 8, 8)),
        }
        cfg = LossConfig(phi=0.7, ssim_window=5)

        def build(t):
            return smoothing_loss(t["pred"], t["label"], cfg)

        return build, arrays

    case("smoothing_loss", make_loss)

    return cases


# Deep composites get a smaller probe step: with step 1e-3 a perturbation can
# push a pre-activation across the leaky-ReLU kink, which invalidates the
# central difference itself (the analytic rules are unaffected).
_BLOCK_CASES = ("dsa_module", "res_dsa", "msac", "dsan_8x8", "smoothing_loss")
_BLOCK_STEP = 1e-5


def run_suite(seed: int = 0, max_elems: int = 4, tol: float = TOLERANCE) -> list[CheckResult]:
    """Run every default case; deterministic for a fixed seed."""
    results = []
    for name, build, arrays, rng in default_cases(seed):
        composite = name in _BLOCK_CASES
        worst = check_case(
            build,
            arrays,
            rng,
            max_elems=max_elems if name in ("dsan_8x8", "msac") else 6,
            step=_BLOCK_STEP if composite else STEP,
            tol=tol,
        )
        results.append(CheckResult(name, worst, worst < tol))
    return results
