"""Label-flipping data poisoning applied to selected organizations.

The attack happens before federated training starts: a seeded sample of a
malicious organization's training rows gets its class label replaced by a
uniform draw over the other three classes. Features are never touched and
validation/test rows stay clean, so per-org validation curves remain
meaningful even for the attackers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InvalidInputError
from .fingerprint import NUM_CLASSES
from .flcore import DataSplit, Organization, derive_seed


@dataclass(frozen=True)
class AttackConfig:
    malicious_org_ids: tuple[int, ...] = ()
    poison_fraction: float = 0.0
    seed: int = 23

    def validate(self) -> None:
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ConfigurationError("poison_fraction must be in [0, 1]")
        if len(set(self.malicious_org_ids)) != len(self.malicious_org_ids):
            raise ConfigurationError("malicious_org_ids contains duplicates")


def poisoned_row_count(org: Organization, fraction: float) -> int:
    return int(fraction * len(org.train))


def flip_labels(org: Organization, fraction: float, seed: int) -> Organization:
    """Return a copy of the organization with poisoned training labels.

    Exactly ``floor(fraction * n_train)`` rows are chosen uniformly without
    replacement; each chosen label moves to a uniformly random different
    class. Deterministic per seed.
    """
    if not 0.0 <= fraction <= 1.0:
        raise InvalidInputError("fraction must be in [0, 1]")
    n = len(org.train)
    count = int(fraction * n)
    labels = org.train.labels.copy()
    if count > 0:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(n, size=count, replace=False)
        # offset in 1..NUM_CLASSES-1 guarantees the new label differs
        offsets = rng.integers(1, NUM_CLASSES, size=count)
        labels[chosen] = (labels[chosen] + offsets) % NUM_CLASSES
    return Organization(
        org_id=org.org_id,
        train=DataSplit(org.train.features, labels, org.train.device_ids),
        validation=org.validation,
        test=org.test,
    )


def apply_attack(
    orgs: Sequence[Organization], attack: AttackConfig
) -> list[Organization]:
    """Poison the malicious organizations, pass the rest through untouched.

    The input organizations are not modified, so callers keep pristine
    copies for diffing.
    """
    attack.validate()
    known = {org.org_id for org in orgs}
    unknown = set(attack.malicious_org_ids) - known
    if unknown:
        raise ConfigurationError(
            f"malicious org ids not in scenario: {sorted(unknown)}"
        )
    malicious = set(attack.malicious_org_ids)
    out = []
    for org in orgs:
        if org.org_id in malicious and attack.poison_fraction > 0.0:
            out.append(
                flip_labels(
                    org,
                    attack.poison_fraction,
                    derive_seed(attack.seed, org.org_id),
                )
            )
        else:
            out.append(org)
    return out
