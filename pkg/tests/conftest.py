"""Session fixtures: desk-scale trained models shared across test modules.

Training happens at most once per pytest session and only when a test
actually asks for the fixture.
"""

import time

import pytest

from hybridnmt.data import make_synthetic_task
from hybridnmt.model import Model, ModelConfig
from hybridnmt.training import TrainConfig, greedy_token_accuracy, train


def hybrid_cfg(vocab=20):
    return ModelConfig(src_vocab=vocab, tgt_vocab=vocab, d_model=64, ffn_filter=256,
                       heads=4, enc_layers=2, dec_layers=1, decoder_kind="gru",
                       attention_kind="additive", gru_hidden=128)


def transformer_cfg(vocab=20, layers=2):
    return ModelConfig(src_vocab=vocab, tgt_vocab=vocab, d_model=64, ffn_filter=256,
                       heads=4, enc_layers=layers, dec_layers=layers,
                       decoder_kind="transformer", attention_kind="multihead",
                       gru_hidden=128)


def train_to_accuracy(model, corpus, heldout, target, max_epochs, seed=0,
                      learning_rate=1e-3):
    """Train with an early stop once greedy accuracy on the held-out pairs
    hits the target; returns (history, final accuracy)."""

    def hook(m, stats):
        return greedy_token_accuracy(m, heldout) >= target

    tc = TrainConfig(learning_rate=learning_rate, max_epochs=max_epochs, seed=seed)
    history = train(model, corpus, tc, epoch_hook=hook)
    return history, greedy_token_accuracy(model, heldout)


@pytest.fixture(scope="session")
def copy_task_data():
    corpus = make_synthetic_task("copy", vocab_size=20, max_len=10, count=2000, seed=11)
    heldout = make_synthetic_task("copy", vocab_size=20, max_len=10, count=200, seed=12)
    return corpus, heldout


@pytest.fixture(scope="session")
def trained_copy_hybrid(copy_task_data):
    """Hybrid model trained on the copy task (acceptance criterion 5 setup)."""
    corpus, heldout = copy_task_data
    model = Model.init(hybrid_cfg(), seed=1)
    t0 = time.time()
    history, accuracy = train_to_accuracy(model, corpus, heldout, target=0.95, max_epochs=30)
    return model, history, accuracy, time.time() - t0


@pytest.fixture(scope="session")
def trained_copy_transformer(copy_task_data):
    corpus, heldout = copy_task_data
    model = Model.init(transformer_cfg(), seed=2)
    t0 = time.time()
    history, accuracy = train_to_accuracy(model, corpus, heldout, target=0.95, max_epochs=30)
    return model, history, accuracy, time.time() - t0


@pytest.fixture(scope="session")
def reverse_task_data():
    corpus = make_synthetic_task("reverse", vocab_size=20, max_len=10, count=2000, seed=21)
    heldout = make_synthetic_task("reverse", vocab_size=20, max_len=10, count=200, seed=22)
    return corpus, heldout


@pytest.fixture(scope="session")
def trained_reverse_teacher(reverse_task_data):
    """2-2 transformer trained to high accuracy on the reverse task (the KD
    teacher). Two train() calls implement a coarse lr step-down: the plateau
    just under the target is Adam noise, not capacity."""
    corpus, heldout = reverse_task_data
    model = Model.init(transformer_cfg(), seed=3)
    h1, accuracy = train_to_accuracy(model, corpus, heldout, target=0.98,
                                     max_epochs=12, seed=0)
    history = list(h1)
    if accuracy < 0.98:
        h2, accuracy = train_to_accuracy(model, corpus, heldout, target=0.98,
                                         max_epochs=20, seed=1, learning_rate=2e-4)
        history += h2
    model.freeze()
    return model, history, accuracy
