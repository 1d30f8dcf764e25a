"""Synthetic-scenario builders shared across test modules."""

import numpy as np

from htdc import SyntheticScenario


def scripted_scenario(vocab_size: int, num_layers: int, steps: list[dict]) -> SyntheticScenario:
    """A scenario whose rows are fully scripted; embeddings are unused."""
    zeros = np.zeros(2)
    return SyntheticScenario(
        seed=0,
        vocab_size=vocab_size,
        num_layers=num_layers,
        visual_embedding=zeros,
        query_embedding=zeros,
        template_embedding=zeros,
        visual_noise_scale=0.0,
        script={"steps": steps},
    )


def random_scenario(rng: np.random.Generator, dim: int = 16, vocab_size: int = 64,
                    num_layers: int = 12, angle: float | None = None,
                    noise: float = 0.8) -> SyntheticScenario:
    """Procedural scenario; ``angle`` fixes the query/visual separation."""
    v = rng.normal(size=dim)
    v /= np.linalg.norm(v)
    if angle is None:
        q = rng.normal(size=dim)
    else:
        u = rng.normal(size=dim)
        u -= (u @ v) * v
        u /= np.linalg.norm(u)
        q = np.cos(angle) * v + np.sin(angle) * u
    t = rng.normal(size=dim)
    t /= np.linalg.norm(t)
    return SyntheticScenario(
        seed=int(rng.integers(0, 2**31 - 1)),
        vocab_size=vocab_size,
        num_layers=num_layers,
        visual_embedding=1.2 * v,
        query_embedding=1.2 * q,
        template_embedding=t,
        visual_noise_scale=noise,
    )
