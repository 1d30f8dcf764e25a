"""Export job description and its validation.

A job pins everything one export needs: the model, the (image, query)
pair, the candidate answer tokens, which layers to record, how many
tokens of each row to store, how the two probe branches are built, and
the output locations. Validation here covers what can be checked without
the model; depth- and vocabulary-dependent checks happen at export time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import UsageError

V0_EMBEDDING_NOISE = "embedding_noise"
V0_IMAGE_NOISE = "image_noise"
V0_KINDS = (V0_EMBEDDING_NOISE, V0_IMAGE_NOISE)

POLICY_FULL = "full"
POLICY_TOPN = "topn_union_candidates"

# Registry of named format-preserving, content-free query replacements.
# Callers may add entries; the name "yes_no" is the default for binary
# question answering.
X0_TEMPLATES: dict[str, str] = {
    "yes_no": "Answer with yes or no.",
    "describe": "Describe the image.",
}


def register_template(name: str, text: str) -> None:
    if not name or not text:
        raise UsageError("template name and text must be non-empty")
    X0_TEMPLATES[name] = text


def resolve_template(spec: str) -> str:
    """A registry key resolves to its template; anything else is literal text."""
    if spec in X0_TEMPLATES:
        return X0_TEMPLATES[spec]
    if not spec.strip():
        raise UsageError("x0 template must be a registry name or non-empty text")
    return spec


@dataclass(frozen=True)
class V0Spec:
    """How the visual-nullification branch weakens the image evidence.

    ``embedding_noise`` adds seeded Gaussian noise of scale ``sigma`` to
    the projected visual embeddings; ``image_noise`` perturbs the pixel
    tensor before the vision tower instead.
    """

    kind: str = V0_EMBEDDING_NOISE
    sigma: float = 0.8

    def __post_init__(self) -> None:
        if self.kind not in V0_KINDS:
            raise UsageError(f"v0 kind must be one of {V0_KINDS}, got {self.kind!r}")
        if not self.sigma >= 0.0:
            raise UsageError(f"v0 sigma must be >= 0, got {self.sigma!r}")


@dataclass(frozen=True)
class StoredPolicy:
    """Which token ids of each row land in the trace file."""

    policy: str = POLICY_FULL
    n: int | None = None

    def __post_init__(self) -> None:
        if self.policy == POLICY_FULL:
            if self.n is not None:
                raise UsageError("the full policy takes no token count")
        elif self.policy == POLICY_TOPN:
            if not isinstance(self.n, int) or self.n < 1:
                raise UsageError("topn policy needs a positive token count")
        else:
            raise UsageError(f"unknown stored-token policy {self.policy!r}")

    @property
    def truncates(self) -> bool:
        return self.policy == POLICY_TOPN


def parse_policy(text: str) -> StoredPolicy:
    """Parse the CLI policy spec: "full" or "topn:<N>"."""
    if text == POLICY_FULL:
        return StoredPolicy()
    if text.startswith("topn:"):
        try:
            n = int(text.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad token count in policy spec {text!r}") from None
        return StoredPolicy(policy=POLICY_TOPN, n=n)
    raise UsageError(f"policy must be 'full' or 'topn:<N>', got {text!r}")


@dataclass(frozen=True)
class ExportJob:
    model_id: str
    image_path: str
    query: str
    candidate_token_ids: tuple[int, ...]
    layers: tuple[int, ...]
    out_path: str
    max_steps: int = 8
    stored: StoredPolicy = field(default_factory=StoredPolicy)
    v0: V0Spec = field(default_factory=V0Spec)
    x0_template: str = X0_TEMPLATES["yes_no"]
    seed: int = 0
    sidecar: bool = False
    full_only: bool = False

    def __post_init__(self) -> None:
        if not self.model_id:
            raise UsageError("model identifier must be non-empty")
        if not self.query.strip():
            raise UsageError("query text must be non-empty")
        if not self.x0_template.strip():
            raise UsageError("x0 template must be non-empty")
        cands = tuple(int(t) for t in self.candidate_token_ids)
        if not cands:
            raise UsageError("at least one candidate token id is required")
        if len(set(cands)) != len(cands):
            raise UsageError(f"candidate token ids repeat: {list(cands)}")
        if any(t < 0 for t in cands):
            raise UsageError(f"candidate token ids must be >= 0: {list(cands)}")
        object.__setattr__(self, "candidate_token_ids", cands)
        layers = tuple(int(j) for j in self.layers)
        if not layers:
            raise UsageError("at least one sampled layer is required")
        if list(layers) != sorted(set(layers)):
            raise UsageError(f"sampled layers must be ascending and distinct: {list(layers)}")
        if layers[0] < 1:
            raise UsageError(f"sampled layers are 1-based: {list(layers)}")
        object.__setattr__(self, "layers", layers)
        if self.max_steps < 1:
            raise UsageError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.stored.truncates and self.stored.n < len(cands):
            raise UsageError(
                f"stored-token count {self.stored.n} is smaller than the "
                f"{len(cands)} candidate ids it must always include"
            )

    @property
    def sidecar_path(self) -> str:
        return f"{self.out_path}.ref.json"
