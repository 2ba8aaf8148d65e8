import pytest

from ctxnlu import datagen
from ctxnlu.models import IntentCatalog, ModelConfig
from ctxnlu.training import TrainingConfig, build_classifier

TINY = ModelConfig(d_query=8, heads=2, max_len=24, ffn_dim=16, d_proj=8, mlp_hidden=16, context_mlp=8, dropout=0.0)


@pytest.fixture(scope="session")
def catalog():
    return IntentCatalog.from_dict(datagen.catalog_dict())


@pytest.fixture(scope="session")
def small_data():
    return datagen.generate(datagen.DatasetManifest(train=400, validation=80, test=80, seed=3))


@pytest.fixture
def tiny_classifier(small_data, catalog):
    def make(kind, seed=0, **model_kw):
        mc = ModelConfig(**{**TINY.__dict__, **model_kw})
        return build_classifier(kind, small_data["train"], catalog, TrainingConfig(dropout=0.0, seed=seed), mc)

    return make
