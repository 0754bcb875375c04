import hashlib
import itertools
from dataclasses import replace

import pytest

from block import (
    EMPTY_ROOT,
    Block,
    BlockBody,
    BlockError,
    RecordInvalid,
    assemble_block,
    block_from_json,
    block_to_json,
    build_block,
    merkle_root,
    validate_block,
    validate_chain,
)
from crypto_identity import KeyPair, ZERO_HASH, hash_bytes
from records import build_data_record, build_model_record, build_proof_record


def _oracle_root(leaves):
    """直线式重算：与被测实现分开写"""
    if not leaves:
        return hashlib.sha256(b"").digest()
    level = [hashlib.sha256(b"\x00" + leaf).digest() for leaf in leaves]
    while True:
        if len(level) % 2 == 1:
            level = level + [level[-1]]
        nxt = []
        for i in range(0, len(level), 2):
            nxt.append(hashlib.sha256(b"\x01" + level[i] + level[i + 1])
                       .digest())
        level = nxt
        if len(level) == 1:
            return level[0]


def test_merkle_root_vectors():
    assert merkle_root([]).hex() == \
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    h = hashlib.sha256(b"\x00" + b"L").digest()
    assert merkle_root([b"L"]) == hashlib.sha256(b"\x01" + h + h).digest()
    for n in (2, 3, 5, 8):
        leaves = [f"leaf-{i}".encode() for i in range(n)]
        assert merkle_root(leaves) == _oracle_root(leaves)


def test_merkle_root_is_order_sensitive():
    leaves = [b"a", b"b", b"c"]
    roots = {merkle_root(list(p)) for p in itertools.permutations(leaves)}
    assert len(roots) == 6


@pytest.fixture
def proposer():
    return KeyPair.from_seed("proposer")


@pytest.fixture
def records(sender):
    return [
        build_data_record(sender, hash_bytes(b"d1"), 10),
        build_data_record(sender, hash_bytes(b"d2"), 11),
        build_model_record(sender, hash_bytes(b"m1"), "v1", "m1", 12),
        build_proof_record(sender, hash_bytes(b"d1"), hash_bytes(b"m1"),
                           500_000, hash_bytes(b"t1"), 13),
    ]


def test_empty_block_on_genesis(genesis, proposer):
    block = build_block(genesis, [], proposer, 1)
    assert block.height == 1
    assert block.header.prev_hash == genesis.block_hash
    assert block.header.data_root == EMPTY_ROOT
    assert block.header.model_root == EMPTY_ROOT
    assert block.header.proof_root == EMPTY_ROOT
    assert validate_block(block, genesis) is None


def test_build_block_is_deterministic(genesis, proposer, records):
    a = build_block(genesis, records, proposer, 5)
    b = build_block(genesis, list(reversed(records)), proposer, 5)
    assert a.block_hash == b.block_hash
    assert len(a.body.data_lane) == 2
    assert validate_block(a, genesis) is None


def test_build_block_rejects_unadmitted(genesis, proposer, records):
    broken = replace(records[0], timestamp=99)
    with pytest.raises(RecordInvalid):
        build_block(genesis, [broken], proposer, 5)
    with pytest.raises(RecordInvalid):
        build_block(genesis, [records[0], records[0]], proposer, 5)


def _retamper(block, **lanes):
    return Block(block.header, replace(block.body, **lanes))


def test_tamper_matrix(genesis, proposer, records, sender):
    first = build_block(genesis, records, proposer, 5)
    second = build_block(first, [build_data_record(sender, hash_bytes(b"x"),
                                                   20)], proposer, 6)
    assert validate_chain([genesis, first, second]) is None

    extra_data = build_data_record(sender, hash_bytes(b"d3"), 30)
    extra_model = build_model_record(sender, hash_bytes(b"m2"), "v1", "m2", 30)
    mutated_proof = replace(first.body.proof_lane[0],
                            validation_score=400_000)
    cases = [
        (assemble_block(3, first.block_hash, 7, first.body, proposer),
         BlockError.BAD_HEIGHT),
        (assemble_block(1, hash_bytes(b"random"), 7, first.body, proposer),
         BlockError.BAD_PREV_HASH),
        (_retamper(first, data_lane=(extra_data,)), BlockError.BAD_DATA_ROOT),
        (_retamper(first, model_lane=(extra_model,)),
         BlockError.BAD_MODEL_ROOT),
        (_retamper(first, proof_lane=(mutated_proof,)),
         BlockError.BAD_PROOF_ROOT),
        (Block(replace(first.header,
                       signature=bytes(reversed(first.header.signature))),
               first.body), BlockError.BAD_BLOCK_SIGNATURE),
    ]
    for block, expected in cases:
        assert validate_block(block, genesis) is expected


def test_invalid_record_with_matching_root(genesis, proposer, records):
    # 根按篡改后的车道重新计算，只能靠逐条准入发现
    broken = replace(records[0], timestamp=77)
    block = assemble_block(1, genesis.block_hash, 5,
                           BlockBody(data_lane=(broken,)), proposer)
    assert validate_block(block, genesis) is BlockError.BAD_RECORD


def test_header_signed_by_someone_else(genesis, proposer, other, records):
    block = build_block(genesis, records, proposer, 5)
    forged = replace(block.header, proposer_public_key=other.public_key)
    assert validate_block(Block(forged, block.body), genesis) is \
        BlockError.BAD_BLOCK_SIGNATURE


def test_validate_chain_reports_index(genesis, proposer, records):
    first = build_block(genesis, records, proposer, 5)
    bad = assemble_block(2, ZERO_HASH, 6, first.body, proposer)
    assert validate_chain([genesis]) is None
    assert validate_chain([genesis, first, bad]) == \
        (2, BlockError.BAD_PREV_HASH)
    assert validate_chain([first]) == (0, BlockError.BAD_HEIGHT)


def test_chain_store_append(chain, proposer, records):
    block = build_block(chain.tip, records, proposer, 5)
    assert chain.append(block) is None
    assert chain.height == 1
    assert chain.append(block) is BlockError.BAD_HEIGHT
    assert len(chain.snapshot()) == 2


def test_block_json_codec(genesis, proposer, records):
    block = build_block(genesis, records, proposer, 5)
    data = block_to_json(block)
    assert data["block_hash"] == block.block_hash.hex()
    decoded = block_from_json(data)
    assert decoded == block
    assert validate_block(decoded, genesis) is None
