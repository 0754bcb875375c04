import logging

import pytest

from block import ChainStore, genesis_block
from crypto_identity import KeyPair, hash_bytes
from inference_engine import MockBackend, make_task
from records import build_data_record, build_model_record, build_proof_record

logging.getLogger("simpy").setLevel(logging.WARNING)


@pytest.fixture
def sender():
    return KeyPair.from_seed("test-sender")


@pytest.fixture
def other():
    return KeyPair.from_seed("test-other")


@pytest.fixture
def data_record(sender):
    return build_data_record(sender, hash_bytes(b"dataset-a"), 1_000,
                             metadata="sample")


@pytest.fixture
def model_record(sender):
    return build_model_record(sender, hash_bytes(b"model-a"), "v1.0",
                              "model-a", 1_001)


@pytest.fixture
def proof_record(sender):
    return build_proof_record(sender, hash_bytes(b"dataset-a"),
                              hash_bytes(b"model-a"), 654_321,
                              hash_bytes(b"task-a"), 1_002)


@pytest.fixture
def genesis():
    return genesis_block()


@pytest.fixture
def chain():
    return ChainStore()


@pytest.fixture
def backend():
    return MockBackend()


@pytest.fixture
def task():
    return make_task(hash_bytes(b"dataset-a"), hash_bytes(b"model-a"), "v1",
                     b"what is two plus two", [("temperature", "0")],
                     deadline=5_000)
