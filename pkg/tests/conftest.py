import pathlib
import sys

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))


@pytest.fixture(scope="session")
def micro_corpus(tmp_path_factory):
    """Tiny on-disk corpus shared across training/service tests: 8 samples,
    8x8 pixels, 2 frames, 2 sprites each."""
    from sketchanim.data_factory import write_corpus

    root = tmp_path_factory.mktemp("micro_corpus")
    write_corpus(root, size=8, seed=101, width=8, height=8, frames=2,
                 min_sprites=2, max_sprites=2)
    return root


def micro_model_config(corpus_dir):
    from sketchanim.data_factory import read_manifest
    from sketchanim.training import model_config_for_corpus

    return model_config_for_corpus(
        read_manifest(corpus_dir), hidden_dim=16, blocks=2, heads=2, instance_px=4,
        semantic_dim=8, semantic_tokens=2, text_buckets=512, schedule_steps=50,
        max_instances=4,
    )


@pytest.fixture(scope="session")
def micro_trained(tmp_path_factory, micro_corpus):
    """A briefly trained micro-model checkpoint (2-sprite corpus)."""
    from sketchanim.training import TrainConfig, train

    out = tmp_path_factory.mktemp("micro_train")
    config = TrainConfig(learning_rate=1e-3, steps=60, seed=7, checkpoint_every=0,
                         log_every=20)
    return train(config, micro_corpus, out, micro_model_config(micro_corpus))
