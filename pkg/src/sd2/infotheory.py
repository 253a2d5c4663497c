"""Exact information-theoretic identities on small discrete joints.

The identities that justify replacing representation-level mutual-information
minimization with prediction-distribution KL terms are all statements about a
joint distribution over (Y, R_a, R_c).  On alphabets this small they can be
checked by direct enumeration, which is what these functions do: everything is
computed from exact marginals of a probability table, in nats.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng

VARS = ("y", "ra", "rc")
_AXIS = {"y": 0, "ra": 1, "rc": 2}

PROB_FLOOR = 1e-7  # clamp for KL denominators


@dataclass(frozen=True)
class DiscreteJoint:
    """Probability table over (Y, R_a, R_c); alphabet sizes 2..8 each."""

    table: np.ndarray = field()

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 3:
            raise ValueError("joint table must have three axes (y, ra, rc)")
        if any(not 2 <= s <= 8 for s in t.shape):
            raise ValueError(f"alphabet sizes must be in [2, 8], got {t.shape}")
        if np.any(t < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(t.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {t.sum()!r}, not 1")
        object.__setattr__(self, "table", t)

    def marginal(self, subset: tuple[str, ...]) -> np.ndarray:
        axes = tuple(_AXIS[v] for v in subset)
        drop = tuple(i for i in range(3) if i not in axes)
        m = self.table.sum(axis=drop)
        # reorder to the requested variable order
        order = np.argsort(np.argsort(axes))
        return np.transpose(m, order) if m.ndim > 1 else m


def _plogp(p: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask])))


def entropy(joint: DiscreteJoint, subset: tuple[str, ...]) -> float:
    """Shannon entropy (nats) of the marginal over `subset`."""
    if not subset:
        raise ValueError("subset must be nonempty")
    return -_plogp(joint.marginal(subset))


def mutual_info(joint: DiscreteJoint, a: str, b: str) -> float:
    """I(A;B) = H(A) + H(B) - H(A,B), clipped at zero."""
    if a == b:
        raise ValueError("mutual_info requires two distinct variables")
    value = entropy(joint, (a,)) + entropy(joint, (b,)) - entropy(joint, (a, b))
    return max(value, 0.0)


def cond_mutual_info(joint: DiscreteJoint, a: str, b: str, given: str) -> float:
    """I(A;B|C) = H(A|C) - H(A|B,C), from exact marginals."""
    if len({a, b, given}) != 3:
        raise ValueError("cond_mutual_info requires three distinct variables")
    h_ac = entropy(joint, (a, given))
    h_c = entropy(joint, (given,))
    h_abc = entropy(joint, (a, b, given))
    h_bc = entropy(joint, (b, given))
    return max((h_ac - h_c) - (h_abc - h_bc), 0.0)


def chain_rule_residual(joint: DiscreteJoint) -> float:
    """I(Ra;Rc) - [I(Y;Rc) + I(Ra;Rc|Y) - I(Rc;Y|Ra)]; identically zero."""
    lhs = mutual_info(joint, "ra", "rc")
    rhs = (mutual_info(joint, "y", "rc")
           + cond_mutual_info(joint, "ra", "rc", "y")
           - cond_mutual_info(joint, "rc", "y", "ra"))
    return lhs - rhs


def theorem1_residual(joint: DiscreteJoint) -> float:
    """[I(Y;Rc) - I(Rc;Y|Ra)] minus its entropy expansion; identically zero."""
    lhs = mutual_info(joint, "y", "rc") - cond_mutual_info(joint, "rc", "y", "ra")
    rhs = (entropy(joint, ("y",))
           - (entropy(joint, ("y", "rc")) - entropy(joint, ("rc",)))
           - (entropy(joint, ("y", "ra")) - entropy(joint, ("ra",)))
           + (entropy(joint, ("y", "rc", "ra")) - entropy(joint, ("rc", "ra"))))
    return lhs - rhs


def premise_gap(joint: DiscreteJoint) -> float:
    """I(Ra;Rc) - [I(Y;Rc) - I(Rc;Y|Ra)] = I(Ra;Rc|Y).

    Distance of the joint from the conditional-independence premise that
    licenses dropping the I(Ra;Rc|Y) term; zero iff Ra and Rc are
    conditionally independent given Y.
    """
    return (mutual_info(joint, "ra", "rc")
            - mutual_info(joint, "y", "rc")
            + cond_mutual_info(joint, "rc", "y", "ra"))


@dataclass(frozen=True)
class GaussianParams:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"standard deviation must be positive, got {self.std}")


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> float:
    """KL(q || p) for two univariate normals, in closed form."""
    return (np.log(p.std) - np.log(q.std)
            + (q.std ** 2 + (q.mean - p.mean) ** 2) / (2.0 * p.std ** 2)
            - 0.5)


def bernoulli_kl(q: float, p: float) -> float:
    """KL(Bernoulli(q) || Bernoulli(p)); p clamped away from {0, 1}."""
    if not (0.0 <= q <= 1.0 and 0.0 <= p <= 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    p = min(max(p, PROB_FLOOR), 1.0 - PROB_FLOOR)
    out = 0.0
    if q > 0:
        out += q * np.log(q / p)
    if q < 1:
        out += (1.0 - q) * np.log((1.0 - q) / (1.0 - p))
    return out


def random_joint(key: int, shape: tuple[int, int, int] = (2, 2, 2)) -> DiscreteJoint:
    """Random joint: normalized exponentials of standard normals."""
    n = int(np.prod(shape))
    raw = np.exp(rng.normals(key, 0, n))
    return DiscreteJoint((raw / raw.sum()).reshape(shape))


def cond_independent_joint(key: int, shape: tuple[int, int, int] = (2, 2, 2)) -> DiscreteJoint:
    """Random joint with Ra and Rc conditionally independent given Y."""
    ky, ka, kc = shape
    u = np.exp(rng.normals(key, 0, ky + ky * ka + ky * kc))
    py = u[:ky] / u[:ky].sum()
    pa = u[ky:ky + ky * ka].reshape(ky, ka)
    pa /= pa.sum(axis=1, keepdims=True)
    pc = u[ky + ky * ka:].reshape(ky, kc)
    pc /= pc.sum(axis=1, keepdims=True)
    table = py[:, None, None] * pa[:, :, None] * pc[:, None, :]
    return DiscreteJoint(table / table.sum())


def xor_joint() -> DiscreteJoint:
    """Y = Ra XOR Rc with independent fair inputs."""
    table = np.zeros((2, 2, 2))
    for a in (0, 1):
        for c in (0, 1):
            table[a ^ c, a, c] = 0.25
    return DiscreteJoint(table)


def verify_identities(n_joints: int, seed: int = 0,
                      tol: float = 1e-10) -> dict[str, float]:
    """Run the full identity suite on random joints; returns worst residuals.

    Raises AssertionError on the first violated identity.
    """
    worst = {"chain_rule": 0.0, "theorem1": 0.0, "premise_gap": 0.0,
             "premise_vs_cmi": 0.0}
    for i in range(n_joints):
        shape = tuple(2 + int(u * 3) for u in rng.uniforms(rng.mix_key(seed, "shape"), 3 * i, 3))
        j = random_joint(rng.mix_key_int(seed, i), shape)
        worst["chain_rule"] = max(worst["chain_rule"], abs(chain_rule_residual(j)))
        worst["theorem1"] = max(worst["theorem1"], abs(theorem1_residual(j)))
        worst["premise_vs_cmi"] = max(
            worst["premise_vs_cmi"],
            abs(premise_gap(j) - cond_mutual_info(j, "ra", "rc", "y")))
        ci = cond_independent_joint(rng.mix_key_int(seed, 2 ** 32 + i), shape)
        worst["premise_gap"] = max(worst["premise_gap"], abs(premise_gap(ci)))
    for name in ("chain_rule", "theorem1", "premise_gap"):
        if worst[name] >= tol:
            raise AssertionError(f"identity {name} violated: residual {worst[name]:.3e}")
    if worst["premise_vs_cmi"] >= 1e-12:
        raise AssertionError("premise_gap disagrees with conditional mutual information")
    return worst
