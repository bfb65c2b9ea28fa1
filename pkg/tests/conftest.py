import pytest
import torch

from promptvlp.corpus import assign_splits, make_synthetic_images
from promptvlp.promptgen import (
    TEMPLATES,
    CategoryEntry,
    FixtureBackend,
    build_text_corpus,
)


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    # Tiny models run faster single-threaded, and it keeps traces stable.
    torch.set_num_threads(1)


DESK_LABELS = (
    "duck", "refinery", "snorkel_diving", "maple_tree",
    "tram", "lighthouse", "espresso", "glacier",
)


@pytest.fixture(scope="session")
def desk_entries():
    return [CategoryEntry(f"c{i:02d}", label) for i, label in enumerate(DESK_LABELS)]


@pytest.fixture(scope="session")
def desk_corpus(desk_entries):
    """8 categories, 9 prompts x 5 responses = 360 texts, 64 synthetic images."""
    corpus = build_text_corpus(desk_entries, TEMPLATES, FixtureBackend(),
                               responses_per_prompt=5)
    images = make_synthetic_images([e.category_id for e in desk_entries], 8, seed=1)
    images, desc_splits = assign_splits(images, corpus.records,
                                        policy="instance-holdout",
                                        eval_fraction=0.25, seed=3)
    return {"entries": desk_entries, "corpus": corpus, "images": images,
            "desc_splits": desc_splits}
