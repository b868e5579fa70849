import numpy as np
import pytest
import torch
import torch.nn.functional as F

from drgn.data import SamplePair, save_image


def smooth_image(rng: np.random.Generator, size: int = 96, scale: float = 0.6, offset: float = 0.3) -> np.ndarray:
    """Piecewise-smooth random image: low-frequency noise upsampled bilinearly."""
    cells = max(4, size // 8)
    base = rng.random((cells, cells, 3)).astype(np.float32)
    t = torch.from_numpy(base.transpose(2, 0, 1)).unsqueeze(0)
    up = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return (up[0].numpy().transpose(1, 2, 0) * scale + offset).astype(np.float32)


def darken(img: np.ndarray, rng: np.random.Generator, gain: float = 0.18, noise: float = 0.01) -> np.ndarray:
    low = img * gain + rng.normal(0.0, noise, img.shape).astype(np.float32)
    return np.clip(low, 0.0, 1.0).astype(np.float32)


def toy_pairs(n: int, size: int, seed: int = 42) -> list[SamplePair]:
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        normal = smooth_image(rng, size)
        pairs.append(SamplePair(lowlight=darken(normal, rng), normal=normal, id=f"p{i}"))
    return pairs


def toy_refs(n: int, size: int, seed: int = 43) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [smooth_image(rng, size) for _ in range(n)]


def write_pair_dirs(root, pairs: list[SamplePair]):
    """Materialize pairs as <root>/low and <root>/high PNG trees."""
    low_dir = root / "low"
    high_dir = root / "high"
    low_dir.mkdir(parents=True)
    high_dir.mkdir(parents=True)
    for p in pairs:
        save_image(p.lowlight, low_dir / f"{p.id}.png")
        save_image(p.normal, high_dir / f"{p.id}.png")
    return root


def numerical_gradient(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar function, element by element."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(f(x))
            flat[i] = orig - h
            down = float(f(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-300)
    return float((a - b).norm()) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
