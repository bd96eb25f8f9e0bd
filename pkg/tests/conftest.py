import pytest

from aro_lab.corpus import synth_corpus
from aro_lab.models import train_asr, train_srm


@pytest.fixture(scope="session")
def corpus():
    return synth_corpus(word_count=20, utterance_count=250, seed=0)


@pytest.fixture(scope="session")
def trained(corpus):
    """Default-budget models on the default corpus, shared by the slow tests."""
    models = {arch: train_asr(corpus, arch, seed=0) for arch in "ABC"}
    models["SRM"] = train_srm(corpus, seed=0)
    return models
