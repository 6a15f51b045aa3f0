"""Expansion of multi-modal log-likelihood bounds into weighted ELBO terms.

A :class:`LossExpression` is a canonical, merged list of :class:`LossTerm`
objects, each carrying an exact :class:`fractions.Fraction` weight. Subsets of
modalities are plain ``int`` bitmasks over the canonical (lexicographic)
modality order, so bit ``i`` refers to ``modality_set.modalities[i]``.

Signs are not stored: reconstruction terms enter the ELBO positively, both
KL kinds negatively (see :attr:`LossTerm.sign`).
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator

MAX_MODALITIES = 12
MAX_BRUTEFORCE_MODALITIES = 8


class Likelihood(str, enum.Enum):
    BERNOULLI = "bern"
    GAUSSIAN = "gauss"


class TermKind(enum.IntEnum):
    # discriminant fixes canonical order: reconstruction first, then the penalties
    RECON = 0
    PRIOR_KL = 1
    CROSS_KL = 2


class Variant(str, enum.Enum):
    VANILLA = "vanilla"
    JOINT = "joint"
    JMVAE = "jmvae"
    M2VAE = "m2vae"
    JMVAE3_STYLE = "jmvae3"


_KIND_NAMES = {TermKind.RECON: "recon", TermKind.PRIOR_KL: "prior_kl", TermKind.CROSS_KL: "cross_kl"}
_KIND_BY_NAME = {v: k for k, v in _KIND_NAMES.items()}


class ExpansionError(ValueError):
    """Raised when an expansion is requested for an unsupported modality count."""


class ExpressionParseError(ValueError):
    """Malformed serialized expression; ``position`` is a character offset."""

    def __init__(self, msg: str, position: int):
        super().__init__(f"{msg} (at position {position})")
        self.position = position


class ExpressionSemanticError(ValueError):
    """Well-formed input that violates a LossExpression invariant."""


@dataclass(frozen=True)
class Modality:
    name: str
    data_dim: int
    likelihood: Likelihood = Likelihood.GAUSSIAN

    def __post_init__(self):
        if not self.name or not isinstance(self.name, str):
            raise ValueError("modality name must be a nonempty string")
        if any(ch in self.name for ch in ",:{}|+"):
            raise ValueError(f"modality name {self.name!r} contains a reserved character")
        if int(self.data_dim) < 1:
            raise ValueError(f"modality {self.name!r}: data_dim must be >= 1")
        object.__setattr__(self, "data_dim", int(self.data_dim))
        object.__setattr__(self, "likelihood", Likelihood(self.likelihood))


@dataclass(frozen=True)
class ModalitySet:
    """Modalities in canonical (lexicographic) order plus the latent width."""

    modalities: tuple[Modality, ...]
    latent_dim: int = 2

    def __post_init__(self):
        mods = tuple(sorted(self.modalities, key=lambda m: m.name))
        if not mods:
            raise ValueError("a modality set needs at least one modality")
        names = [m.name for m in mods]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names in {names}")
        if int(self.latent_dim) < 1:
            raise ValueError("latent_dim must be >= 1")
        object.__setattr__(self, "modalities", mods)
        object.__setattr__(self, "latent_dim", int(self.latent_dim))

    @classmethod
    def from_names(cls, names: Iterable[str], data_dim: int = 1, latent_dim: int = 2,
                   likelihood: Likelihood = Likelihood.GAUSSIAN) -> "ModalitySet":
        return cls(tuple(Modality(n, data_dim, likelihood) for n in names), latent_dim)

    def __len__(self) -> int:
        return len(self.modalities)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.modalities)

    @property
    def full_mask(self) -> int:
        return (1 << len(self.modalities)) - 1

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown modality {name!r}") from None

    def mask_of(self, names: Iterable[str]) -> int:
        mask = 0
        for n in names:
            mask |= 1 << self.index(n)
        return mask

    def members(self, mask: int) -> tuple[Modality, ...]:
        return tuple(self.modalities[i] for i in bits(mask))

    def member_names(self, mask: int) -> tuple[str, ...]:
        return tuple(self.modalities[i].name for i in bits(mask))


def bits(mask: int) -> Iterator[int]:
    """Indices of set bits, ascending."""
    i = 0
    while mask:
        if mask & 1:
            yield i
        mask >>= 1
        i += 1


def popcount(mask: int) -> int:
    return bin(mask).count("1")


@dataclass(frozen=True)
class LossTerm:
    """One weighted ELBO term.

    ``index`` is the reconstruction target (RECON) or the dropped modality
    (CROSS_KL); it is ``None`` for PRIOR_KL. A CROSS_KL term compares the
    posterior of ``subset`` with the posterior of ``subset`` minus ``index``.
    """

    kind: TermKind
    subset: int
    index: int | None = None
    coefficient: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "kind", TermKind(self.kind))
        object.__setattr__(self, "coefficient", Fraction(self.coefficient))
        if self.subset <= 0:
            raise ExpressionSemanticError("term subset must be nonempty")
        if self.coefficient <= 0:
            raise ExpressionSemanticError(f"coefficient must be positive, got {self.coefficient}")
        if self.kind is TermKind.PRIOR_KL:
            if self.index is not None:
                raise ExpressionSemanticError("prior KL terms take no modality index")
        else:
            if self.index is None or not (self.subset >> self.index) & 1:
                raise ExpressionSemanticError("term modality must belong to its subset")
            if self.kind is TermKind.CROSS_KL and popcount(self.subset) < 2:
                raise ExpressionSemanticError("cross KL needs a subset of size >= 2")

    @property
    def key(self) -> tuple[int, int, int]:
        return (int(self.kind), self.subset, -1 if self.index is None else self.index)

    @property
    def sign(self) -> int:
        return 1 if self.kind is TermKind.RECON else -1

    @property
    def reference(self) -> int | None:
        """Subset of the reference posterior of a CROSS_KL term."""
        if self.kind is TermKind.CROSS_KL:
            return self.subset & ~(1 << self.index)
        return None


@dataclass(frozen=True)
class LossExpression:
    variant: Variant
    modality_set: ModalitySet
    terms: tuple[LossTerm, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        n = len(self.modality_set)
        terms = tuple(sorted(self.terms, key=lambda t: t.key))
        keys = [t.key for t in terms]
        if len(set(keys)) != len(keys):
            raise ExpressionSemanticError("duplicate term kinds; merge coefficients first")
        for t in terms:
            if t.subset >> n:
                raise ExpressionSemanticError("term subset references a modality outside the set")
        object.__setattr__(self, "terms", terms)

    def coefficient(self, kind: TermKind, subset: int, index: int | None = None) -> Fraction:
        key = (int(kind), subset, -1 if index is None else index)
        for t in self.terms:
            if t.key == key:
                return t.coefficient
        return Fraction(0)

    def encoder_inventory(self) -> tuple[int, ...]:
        """Every subset whose posterior some term needs, in mask order."""
        masks = set()
        for t in self.terms:
            masks.add(t.subset)
            if t.kind is TermKind.CROSS_KL:
                masks.add(t.reference)
        return tuple(sorted(masks))

    def decoder_inventory(self) -> tuple[int, ...]:
        return tuple(sorted({t.index for t in self.terms if t.kind is TermKind.RECON}))

    def term_label(self, term: LossTerm) -> str:
        """Short ASCII identifier used for metrics columns."""
        ms = self.modality_set
        sub = ",".join(ms.member_names(term.subset))
        if term.kind is TermKind.RECON:
            return f"recon{{{sub}}}:{ms.modalities[term.index].name}"
        if term.kind is TermKind.PRIOR_KL:
            return f"prior_kl{{{sub}}}"
        ref = ",".join(ms.member_names(term.reference))
        return f"cross_kl{{{sub}}}|{{{ref}}}"


def _merge(variant: Variant, ms: ModalitySet, weighted: Iterable[tuple[tuple, Fraction]]) -> LossExpression:
    acc: dict[tuple, Fraction] = {}
    for key, c in weighted:
        acc[key] = acc.get(key, Fraction(0)) + c
    terms = [LossTerm(TermKind(k), s, None if i < 0 else i, c) for (k, s, i), c in acc.items()]
    return LossExpression(variant, ms, tuple(terms))


def _joint_keys(mask: int) -> list[tuple]:
    keys = [(int(TermKind.PRIOR_KL), mask, -1)]
    keys += [(int(TermKind.RECON), mask, i) for i in bits(mask)]
    return keys


def _vi_keys(mask: int) -> list[tuple]:
    keys = _joint_keys(mask)
    if popcount(mask) >= 2:
        keys += [(int(TermKind.CROSS_KL), mask, i) for i in bits(mask)]
    return keys


def expand_vanilla(ms: ModalitySet) -> LossExpression:
    if len(ms) != 1:
        raise ExpansionError(f"vanilla VAE takes exactly one modality, got {len(ms)}")
    return _merge(Variant.VANILLA, ms, ((k, Fraction(1)) for k in _joint_keys(1)))


def expand_joint(ms: ModalitySet) -> LossExpression:
    if len(ms) < 2:
        raise ExpansionError("joint VAE needs at least two modalities")
    return _merge(Variant.JOINT, ms, ((k, Fraction(1)) for k in _joint_keys(ms.full_mask)))


def expand_jmvae(ms: ModalitySet) -> LossExpression:
    """Bimodal JMVAE: joint ELBO plus KL from the joint to each unimodal posterior."""
    if len(ms) != 2:
        raise ExpansionError("JMVAE is defined here for exactly two modalities; "
                             "use expand_jmvae3_style for three")
    return _merge(Variant.JMVAE, ms, ((k, Fraction(1)) for k in _vi_keys(ms.full_mask)))


def expand_jmvae3_style(ms: ModalitySet) -> LossExpression:
    """Trimodal JMVAE: the cross KLs reference only the pairwise encoders."""
    if len(ms) != 3:
        raise ExpansionError("the pairwise-only JMVAE form takes exactly three modalities")
    return _merge(Variant.JMVAE3_STYLE, ms, ((k, Fraction(1)) for k in _vi_keys(ms.full_mask)))


def coefficient(k: int, n: int) -> Fraction:
    """Weight of every term attached to a size-``k`` subset in an ``n``-modality M2VAE.

    Equals (n-k)! (k-1)! / n!: the (n-k)! removal orders that reach a given
    subset, each weighted by 1/n * 1/(n-1) * ... * 1/k.
    """
    if not (1 <= k <= n):
        raise ExpansionError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n > MAX_MODALITIES:
        raise ExpansionError(f"n={n} exceeds the supported maximum of {MAX_MODALITIES}")
    return Fraction(math.factorial(n - k) * math.factorial(k - 1), math.factorial(n))


def expand_m2vae(ms: ModalitySet) -> LossExpression:
    n = len(ms)
    if n > MAX_MODALITIES:
        raise ExpansionError(f"M2VAE expansion supports at most {MAX_MODALITIES} modalities")
    weighted = []
    for mask in range(1, ms.full_mask + 1):
        c = coefficient(popcount(mask), n)
        weighted += [(key, c) for key in _vi_keys(mask)]
    return _merge(Variant.M2VAE, ms, weighted)


def expand_m2vae_bruteforce(ms: ModalitySet) -> LossExpression:
    """Evaluate the recursive bound literally, one removal path at a time.

    No memoisation and no closed-form weights: every level divides by the size
    of its set and repeated subsets are merged by exact addition.
    """
    n = len(ms)
    if n > MAX_BRUTEFORCE_MODALITIES:
        raise ExpansionError(f"brute-force recursion is limited to {MAX_BRUTEFORCE_MODALITIES} modalities")

    def recurse(mask: int) -> dict[tuple, Fraction]:
        size = popcount(mask)
        if size == 1:
            return {key: Fraction(1) for key in _joint_keys(mask)}
        acc = {key: Fraction(1) for key in _vi_keys(mask)}
        for i in bits(mask):
            for key, c in recurse(mask & ~(1 << i)).items():
                acc[key] = acc.get(key, Fraction(0)) + c
        return {key: c / size for key, c in acc.items()}

    return _merge(Variant.M2VAE, ms, recurse(ms.full_mask).items())


EXPANDERS = {
    Variant.VANILLA: expand_vanilla,
    Variant.JOINT: expand_joint,
    Variant.JMVAE: expand_jmvae,
    Variant.M2VAE: expand_m2vae,
    Variant.JMVAE3_STYLE: expand_jmvae3_style,
}


def expand(variant: Variant | str, ms: ModalitySet) -> LossExpression:
    return EXPANDERS[Variant(variant)](ms)


# -- rendering --------------------------------------------------------------

def _coeff_str(c: Fraction) -> str:
    return str(c.numerator) if c.denominator == 1 else f"{c.numerator}/{c.denominator}"


def _render_text(expr: LossExpression) -> str:
    ms = expr.modality_set
    parts = []
    for t in expr.terms:
        given = ",".join(ms.member_names(t.subset))
        if t.kind is TermKind.RECON:
            target = ms.modalities[t.index].name
            sub = "" if t.subset == 1 << t.index else f"_q(z|{given})"
            body = f"E{sub}[log p({target}|z)]"
        elif t.kind is TermKind.PRIOR_KL:
            body = f"KL(q(z|{given})‖p(z))"
        else:
            ref = ",".join(ms.member_names(t.reference))
            body = f"KL(q(z|{given})‖q(z|{ref}))"
        sign = "+" if t.sign > 0 else "−"
        parts.append(f"{sign}{_coeff_str(t.coefficient)}·{body}")
    return " ".join(parts)


def _render_latex(expr: LossExpression) -> str:
    ms = expr.modality_set

    def enc(mask):
        names = ms.member_names(mask)
        return rf"q_{{\phi_{{{''.join(names)}}}}}(z \mid {','.join(names)})"

    lines = []
    for t in expr.terms:
        c = t.coefficient
        coeff = "" if c == 1 else (rf"\tfrac{{{c.numerator}}}{{{c.denominator}}}" if c.denominator != 1
                                   else str(c.numerator))
        if t.kind is TermKind.RECON:
            m = ms.modalities[t.index].name
            body = rf"\mathbb{{E}}_{{{enc(t.subset)}}} \log p_{{\theta_{{{m}}}}}({m} \mid z)"
        elif t.kind is TermKind.PRIOR_KL:
            body = rf"D_{{\mathrm{{KL}}}}\left({enc(t.subset)} \,\|\, p(z)\right)"
        else:
            body = rf"D_{{\mathrm{{KL}}}}\left({enc(t.subset)} \,\|\, {enc(t.reference)}\right)"
        sign = "+" if t.sign > 0 else "-"
        lines.append(rf"{sign} {coeff}\, {body}" if coeff else rf"{sign} {body}")
    head = rf"\mathcal{{L}}_{{\mathrm{{{expr.variant.value}}}}} ="
    return head + "\n" + " \\\\\n".join("  &" + line for line in lines)


def to_dict(expr: LossExpression) -> dict:
    ms = expr.modality_set
    terms = []
    for t in expr.terms:
        rec = {"kind": _KIND_NAMES[t.kind], "subset": list(ms.member_names(t.subset))}
        if t.kind is TermKind.RECON:
            rec["target"] = ms.modalities[t.index].name
        elif t.kind is TermKind.CROSS_KL:
            rec["dropped"] = ms.modalities[t.index].name
        rec["coeff"] = f"{t.coefficient.numerator}/{t.coefficient.denominator}"
        terms.append(rec)
    return {
        "variant": expr.variant.value,
        "modalities": [{"name": m.name, "dim": m.data_dim, "likelihood": m.likelihood.value}
                       for m in ms.modalities],
        "latent_dim": ms.latent_dim,
        "terms": terms,
    }


def render(expr: LossExpression, fmt: str = "text") -> str:
    fmt = fmt.lower()
    if fmt == "text":
        return _render_text(expr)
    if fmt == "json":
        return json.dumps(to_dict(expr), indent=2, ensure_ascii=False) + "\n"
    if fmt == "latex":
        return _render_latex(expr)
    raise ValueError(f"unknown format {fmt!r}")


def _parse_fraction(s) -> Fraction:
    if not isinstance(s, str):
        raise ExpressionSemanticError(f"coefficient must be a 'p/q' string, got {s!r}")
    try:
        num, _, den = s.partition("/")
        c = Fraction(int(num), int(den) if den else 1)
    except (ValueError, ZeroDivisionError):
        raise ExpressionSemanticError(f"bad coefficient {s!r}") from None
    if c <= 0:
        raise ExpressionSemanticError(f"coefficient must be positive, got {s!r}")
    return c


def from_dict(doc: dict) -> LossExpression:
    try:
        variant = Variant(doc["variant"])
        ms = ModalitySet(tuple(Modality(m["name"], m["dim"], m["likelihood"]) for m in doc["modalities"]),
                         doc["latent_dim"])
        terms = []
        for rec in doc["terms"]:
            kind = _KIND_BY_NAME.get(rec["kind"])
            if kind is None:
                raise ExpressionSemanticError(f"unknown term kind {rec['kind']!r}")
            subset = ms.mask_of(rec["subset"])
            if kind is TermKind.RECON:
                index = ms.index(rec["target"])
            elif kind is TermKind.CROSS_KL:
                index = ms.index(rec["dropped"])
            else:
                index = None
            terms.append(LossTerm(kind, subset, index, _parse_fraction(rec["coeff"])))
    except ExpressionSemanticError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ExpressionSemanticError(f"invalid expression document: {exc}") from exc
    return LossExpression(variant, ms, tuple(terms))


def parse_expression(text: str, fmt: str = "json") -> LossExpression:
    if fmt.lower() != "json":
        raise ValueError("only JSON expressions can be parsed")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ExpressionParseError(exc.msg, exc.pos) from exc
    if not isinstance(doc, dict):
        raise ExpressionParseError("expected a JSON object", 0)
    return from_dict(doc)
