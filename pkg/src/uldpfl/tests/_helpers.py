from functools import lru_cache
from typing import Tuple

import numpy as np

from ..libraries.allocation import DistributionSpec, allocate
from ..libraries.crypto import PaillierKeypair, paillier_keygen, seeded_randfunc
from ..libraries.dataset import DatasetSpec, Federation, generate_dataset, training_federation
from ..libraries.fl_core import ModelState
from ..libraries.models import build_model

TOY_KEY_BITS = 512


def small_federation(
        silos: int = 3,
        users: int = 6,
        records: int = 120,
        dim: int = 4,
        seed: int = 0,
        kind: str = 'uniform'
    ) -> Tuple[ModelState, Federation]:
    """
    Used to keep training tests fast: a handful of users over a few silos
    and a logreg model initialised from the same seed.
    """
    allocation = allocate(DistributionSpec(kind=kind, seed=seed), records, users, silos)
    dataset = generate_dataset(DatasetSpec(dim=dim, classes=2, records=records), allocation, seed)
    arch = build_model('logreg', dim, 2)
    model = ModelState(arch.init_params(np.random.default_rng(seed)), arch)
    return model, training_federation(dataset)


@lru_cache(maxsize=None)
def toy_keypair(seed: int = 7) -> PaillierKeypair:
    """Small deterministic key; 512 bits is plenty for the encodings under test."""
    return paillier_keygen(TOY_KEY_BITS, seeded_randfunc(seed))
