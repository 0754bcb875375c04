import hashlib
import struct
from dataclasses import replace
from unittest import mock

import pytest
import requests

import inference_engine
from crypto_identity import KeyPair, hash_bytes
from inference_engine import (
    BackendError,
    HttpModelRunner,
    MockBackend,
    ProofMismatch,
    execute,
    make_proof,
    make_task,
    task_from_json,
    task_problem,
    task_to_json,
    verify_proof,
)
from records import admit


def _oracle(task):
    """按定义直接用 hashlib 计算期望输出"""
    params = struct.pack(">Q", len(task.decoding_params))
    for key, value in task.decoding_params:
        for item in (key, value):
            raw = item.encode()
            params += struct.pack(">I", len(raw)) + raw
    digest = hashlib.sha256(b"\x20" + task.model_hash + task.dataset_hash
                            + task.input_payload + params).digest()
    return digest, int.from_bytes(digest[:8], "big") % 1_000_001


def test_task_id_is_content_addressed(task):
    again = make_task(task.dataset_hash, task.model_hash, task.model_version,
                      task.input_payload, task.decoding_params, task.deadline)
    assert again.task_id == task.task_id
    other = make_task(task.dataset_hash, task.model_hash, task.model_version,
                      task.input_payload, task.decoding_params,
                      task.deadline + 1)
    assert other.task_id != task.task_id
    assert task_problem(task) is None


def test_task_problems(task):
    assert task_problem(replace(task, model_version="bad version"))
    assert task_problem(replace(task, task_id=hash_bytes(b"x")))
    assert task_problem(replace(task, dataset_hash=b"short"))
    big = make_task(task.dataset_hash, task.model_hash, "v1",
                    b"x" * (64 * 1024 + 1))
    assert task_problem(big)


def test_task_json_codec(task):
    assert task_from_json(task_to_json(task)) == task


@pytest.mark.parametrize("payload", [b"", b"what is two plus two",
                                     bytes(range(256))])
def test_mock_backend_matches_oracle(task, payload):
    t = make_task(task.dataset_hash, task.model_hash, "v1", payload,
                  [("temperature", "0"), ("top_k", "1")])
    output_hash, score = MockBackend().run(t)
    assert (output_hash, score) == _oracle(t)
    assert 0 <= score <= 1_000_000


def test_execute_is_pure(task, backend):
    a = execute(task, backend=backend)
    b = execute(task, backend=backend)
    assert a == b
    assert a.task_id == task.task_id


def test_verify_proof_accepts_honest(task, backend):
    executor = KeyPair.from_seed("executor")
    result = execute(task, executor.node_id, backend=backend)
    proof = make_proof(result, task, executor, 42)
    assert admit(proof) is None
    assert proof.sender_id == executor.node_id
    assert verify_proof(proof, task, backend=backend) is None


@pytest.mark.parametrize("delta", [1, 7, 1000])
def test_verify_proof_detects_perturbation(task, backend, delta):
    executor = KeyPair.from_seed("executor")
    result = execute(task, executor.node_id, backend=backend)
    score = result.validation_score + delta
    if score > 1_000_000:
        score = result.validation_score - delta
    fabricated = make_proof(replace(result, validation_score=score), task,
                            executor, 42)
    # 签名是真的，只有重算能发现
    assert admit(fabricated) is None
    assert verify_proof(fabricated, task, backend=backend) is \
        ProofMismatch.SCORE_MISMATCH
    assert verify_proof(fabricated, task, tolerance=delta,
                        backend=backend) is None


def test_verify_proof_task_mismatch(task, backend):
    executor = KeyPair.from_seed("executor")
    other = make_task(hash_bytes(b"dataset-b"), task.model_hash, "v1", b"q")
    proof = make_proof(execute(other, backend=backend), other, executor, 1)
    assert verify_proof(proof, task, backend=backend) is \
        ProofMismatch.TASK_MISMATCH


def _response(status=200, body=None):
    resp = mock.Mock()
    resp.status_code = status
    resp.json.return_value = body
    if status >= 400:
        resp.raise_for_status.side_effect = requests.HTTPError(str(status))
    else:
        resp.raise_for_status.return_value = None
    return resp


def test_http_runner_success(task):
    runner = HttpModelRunner("http://runner.local/infer")
    body = {"output_hash": "ab" * 32, "validation_score": 123}
    with mock.patch.object(runner.session, "post",
                           return_value=_response(body=body)) as post:
        output_hash, score = runner.run(task)
    assert output_hash == bytes.fromhex("ab" * 32)
    assert score == 123
    args, kwargs = post.call_args
    assert args[0] == "http://runner.local/infer"
    assert kwargs["json"]["task_id"] == task.task_id.hex()


@pytest.mark.parametrize("body", [
    {"output_hash": "ab", "validation_score": 1},
    {"output_hash": "ab" * 32, "validation_score": 1_000_001},
    {"output_hash": "ab" * 32, "validation_score": True},
    {"validation_score": 5},
])
def test_http_runner_rejects_bad_body(task, body):
    runner = HttpModelRunner("http://runner.local/infer")
    with mock.patch.object(runner.session, "post",
                           return_value=_response(body=body)):
        with pytest.raises(BackendError):
            runner.run(task)


def test_http_runner_transport_errors(task):
    runner = HttpModelRunner("http://runner.local/infer")
    with mock.patch.object(runner.session, "post",
                           return_value=_response(status=500)):
        with pytest.raises(BackendError):
            runner.run(task)
    with mock.patch.object(runner.session, "post",
                           side_effect=requests.ConnectionError("down")):
        with pytest.raises(BackendError):
            runner.run(task)


def test_get_backend_from_environment(monkeypatch):
    monkeypatch.setattr(inference_engine, "_backend", None)
    monkeypatch.setenv("POI_MODEL_RUNNER_URL", "http://runner.local/infer")
    assert isinstance(inference_engine.get_backend(), HttpModelRunner)
    monkeypatch.setattr(inference_engine, "_backend", None)
    monkeypatch.delenv("POI_MODEL_RUNNER_URL")
    assert isinstance(inference_engine.get_backend(), MockBackend)
