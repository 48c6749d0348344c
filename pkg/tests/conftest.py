import pytest
import torch

_CRITERIA = {}

from hairsplat.config import ModelConfig
from hairsplat.geometry import build_toy_head_template


def small_config(**kw) -> ModelConfig:
    base = dict(image_size=32, patch_size=8, C=16, C_hair=8, pe_bands=2, head_uv=16, scalp_uv=8,
                n_blocks=2, n_self_heads=2, n_cross_heads=2, ffn_mult=2, face_trunk=16, S=16, S_min=4,
                gen_hidden=16)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def template():
    return build_toy_head_template(0, 8)


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def axis_camera(size=32, fov=40.0, dtype=torch.float64):
    """Camera at the origin looking down +z."""
    from hairsplat.render import Camera, intrinsics

    w2c = torch.cat([torch.eye(3), torch.zeros(3, 1)], dim=1)
    return Camera(intrinsics(fov, size, size).to(dtype), w2c.to(dtype), size, size)


def small_scene(n=5, seed=0, depth=4.0, dtype=torch.float64):
    """A few well separated Gaussians in front of ``axis_camera``, distinct depths."""
    from hairsplat.gaussians import FACE, HAIR, GaussianSet

    g = torch.Generator().manual_seed(seed)
    ang = torch.arange(n, dtype=dtype) * (2 * torch.pi / n)
    xy = 0.45 * torch.stack([ang.cos(), ang.sin()], -1)
    z = depth + 0.1 * torch.arange(n, dtype=dtype)
    means = torch.cat([xy, z[:, None]], -1)
    scales = 0.05 + 0.1 * torch.rand(n, 3, generator=g, dtype=dtype)
    quats = torch.randn(n, 4, generator=g, dtype=dtype)
    quats = quats / quats.norm(dim=-1, keepdim=True)
    opac = 0.3 + 0.5 * torch.rand(n, generator=g, dtype=dtype)
    colors = torch.rand(n, 3, generator=g, dtype=dtype)
    sem = torch.tensor([FACE if i % 2 == 0 else HAIR for i in range(n)])
    return GaussianSet(means, scales, quats, opac, colors, sem)


def fd_check(fn, inputs, step=1e-3):
    """Relative error ||analytic - central FD|| / ||FD|| for each input tensor."""
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    errs = []
    for k, x in enumerate(inputs):
        num = torch.zeros_like(x)
        flat = x.detach().clone()
        for i in range(x.numel()):
            args = [y.detach() for y in inputs]
            plus, minus = flat.clone(), flat.clone()
            plus.view(-1)[i] += step
            minus.view(-1)[i] -= step
            args[k] = plus
            fp = float(fn(*args))
            args[k] = minus
            fm = float(fn(*args))
            num.view(-1)[i] = (fp - fm) / (2 * step)
        an = torch.zeros_like(x) if grads[k] is None else grads[k]
        errs.append(float((an - num).norm() / num.norm().clamp_min(1e-12)))
    return errs


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """One small long-hair identity (6 views x 2 expressions at 32 px) on disk."""
    from hairsplat.synthetic import generate_synthetic_dataset

    root = tmp_path_factory.mktemp("tiny_ds")
    cfg = small_config()
    generate_synthetic_dataset(root, seed=0, n_identities=1, n_views=6, n_expressions=2, styles=["long"], cfg=cfg)
    return root


@pytest.fixture(scope="session")
def tiny_identity(tiny_dataset):
    from hairsplat.synthetic import load_identity

    return load_identity(tiny_dataset / "id_000")


# --- acceptance reporting -------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or not (rep.when == "call" or rep.failed):
        return
    n, title = m.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:160]
    _CRITERIA[n] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {n:>2}. {title}: {detail}")
