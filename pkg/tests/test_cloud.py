import socket
import struct

import numpy as np
import pytest

from eqrl.circuit import PackedBatch, plain_batch_update_vectors, random_batch
from eqrl.ckks import SerializationError, keygen, serialize_relin_key, table1_params
from eqrl.cloud import (PROTOCOL_VERSION, ClientSession, FaultCode, InProcessCloud, MsgType,
                        PlaintextSession, ProtocolFault, decode_report, encode_frame,
                        encode_report, loopback_cloud, pack_blobs, parse_fault, read_frame,
                        run_encrypted_training, cloud_serve, send_frame, unpack_blobs)
from eqrl.acceptance import SENTINELS, cloud_holds_secrets
from eqrl.circuit import OpCounter
from eqrl.learner import run_sarsa
from eqrl.mdp import PolicyConfig, QTable, chain_mdp


@pytest.fixture
def cloud(small):
    sock, server = loopback_cloud(small)
    yield sock, server
    sock.close()
    server.shutdown()


def raw_request(sock, msg_type, payload=b""):
    send_frame(sock, msg_type, payload)
    return read_frame(sock)


def hello(sock, params):
    return raw_request(sock, MsgType.HELLO, struct.pack("<H8s", PROTOCOL_VERSION, params.params_hash))


def fault_code(reply):
    assert reply[0] == MsgType.FAULT
    return parse_fault(reply[1]).code


def test_blob_and_report_roundtrip():
    blobs = [b"", b"abc", bytes(range(256))]
    assert unpack_blobs(pack_blobs(blobs)) == blobs
    with pytest.raises(SerializationError):
        unpack_blobs(pack_blobs(blobs)[:-1])
    c = OpCounter()
    with c.timed("Multiply"):
        pass
    idx, back = decode_report(encode_report(7, c))
    assert idx == 7 and back.counts == c.counts and back.seconds == c.seconds


def test_loopback_batch_matches_plaintext(cloud, small, small_keys, rng):
    sock, server = cloud
    batch = random_batch(rng, 100)
    with ClientSession.connect(sock, small_keys, small, rng) as session:
        got = session.upload_batch(batch)
        assert np.max(np.abs(got - plain_batch_update_vectors(batch))) < 1e-4
        session.upload_batch(random_batch(rng, 10))
        assert session.batches == 2
        assert server.sessions[0].batches_served == 2
        assert session.cloud_counter.count_tuple() == (0, 0, 8, 8, 8, 6, 0, 0)
        assert session.client_counter.count_tuple() == (10, 10, 0, 0, 0, 0, 2, 2)


def test_batch_before_relin_key(cloud, small, small_keys, rng):
    sock, _ = cloud
    assert hello(sock, small)[0] == MsgType.HELLO_ACK
    assert fault_code(raw_request(sock, MsgType.BATCH_REQUEST, pack_blobs([b""] * 5))) == \
        FaultCode.MISSING_RELIN_KEY


def test_batch_before_hello(cloud):
    sock, _ = cloud
    assert fault_code(raw_request(sock, MsgType.BATCH_REQUEST, b"")) == FaultCode.PARAMS_MISMATCH


def test_unknown_type_keeps_connection(cloud, small):
    sock, _ = cloud
    assert fault_code(raw_request(sock, 99, b"x")) == FaultCode.MALFORMED
    assert hello(sock, small)[0] == MsgType.HELLO_ACK


def test_params_mismatch(cloud):
    sock, _ = cloud
    assert fault_code(hello(sock, table1_params())) == FaultCode.PARAMS_MISMATCH


def test_wrong_blob_count_and_garbage(cloud, small, small_keys):
    sock, _ = cloud
    hello(sock, small)
    assert raw_request(sock, MsgType.RELIN_KEY_UPLOAD,
                       serialize_relin_key(small_keys.relin))[0] == MsgType.HELLO_ACK
    assert fault_code(raw_request(sock, MsgType.BATCH_REQUEST, pack_blobs([b"x"] * 4))) == \
        FaultCode.MALFORMED
    assert fault_code(raw_request(sock, MsgType.BATCH_REQUEST, pack_blobs([b"EQRL"] * 5))) == \
        FaultCode.MALFORMED


def test_evaluation_fault(cloud, small, small_keys, rng):
    sock, _ = cloud
    session = ClientSession.connect(sock, small_keys, small, rng)
    from eqrl.circuit import pack_and_encrypt
    from eqrl.ckks import mod_switch_to, serialize_ciphertext
    cts, _ = pack_and_encrypt(random_batch(rng, 4), small_keys, small, rng)
    cts[1] = mod_switch_to(cts[1], 1)
    reply = raw_request(sock, MsgType.BATCH_REQUEST, pack_blobs([serialize_ciphertext(c) for c in cts]))
    fault = parse_fault(reply[1])
    assert fault.code == FaultCode.EVALUATION and "operand r" in fault.message


def test_truncated_frame_closes(cloud, small):
    sock, _ = cloud
    sock.sendall(encode_frame(MsgType.HELLO, b"x" * 10)[:8])
    sock.shutdown(socket.SHUT_WR)
    assert fault_code(read_frame(sock)) == FaultCode.MALFORMED


def test_client_local_faults(cloud, small, small_keys, rng):
    sock, _ = cloud
    session = ClientSession.connect(sock, small_keys, small, rng)
    with pytest.raises(ProtocolFault) as err:
        session.upload_batch(PackedBatch(*(np.zeros(0),) * 5, []))
    assert not err.value.remote
    with pytest.raises(ProtocolFault):
        session.upload_batch(random_batch(rng, small.slot_count + 1))


def test_remote_fault_surfaces_on_client(small, rng):
    sock, server = loopback_cloud(table1_params())
    keys = keygen(small, rng)
    with pytest.raises(ProtocolFault) as err:
        ClientSession.connect(sock, keys, small, rng)
    assert err.value.code == FaultCode.PARAMS_MISMATCH and err.value.remote
    server.shutdown()


def test_tcp_endpoint(small, small_keys, rng):
    server = cloud_serve("127.0.0.1:0", small)
    try:
        host, port = server._listener.getsockname()[:2]
        with ClientSession.connect(f"{host}:{port}", small_keys, small, rng) as session:
            batch = random_batch(rng, 16)
            got = session.upload_batch(batch)
            assert np.max(np.abs(got - plain_batch_update_vectors(batch))) < 1e-4
    finally:
        server.shutdown()


def test_cloud_never_holds_secrets(cloud, small, small_keys, rng):
    sock, server = cloud
    batch = random_batch(rng, 8)
    batch.q[:2] = SENTINELS
    with ClientSession.connect(sock, small_keys, small, rng) as session:
        session.upload_batch(batch)
    retained = server.sessions[0].retained_bytes()
    for value in SENTINELS:
        assert struct.pack("<d", value) not in retained
    assert cloud_holds_secrets(server, small_keys, SENTINELS) is False


def test_socket_and_in_process_are_bit_identical(small, cloud):
    sock, _ = cloud
    cfg = PolicyConfig(seed=4)
    keys = keygen(small, np.random.default_rng(8))
    remote = ClientSession.connect(sock, keys, small, np.random.default_rng(9))
    a = run_encrypted_training(chain_mdp(), cfg, 16, 3, remote)
    b = run_encrypted_training(chain_mdp(), cfg, 16, 3, InProcessCloud(keys, small, np.random.default_rng(9)))
    assert a.response_digest == b.response_digest
    assert np.array_equal(a.q.values, b.q.values)
    assert a.max_rel_deviation < 1e-3


def test_zero_batches_leaves_table(small):
    res = run_encrypted_training(chain_mdp(), PolicyConfig(), 8, 0, PlaintextSession(), initial=2.0)
    assert np.all(res.q.values == 2.0) and res.curve == []


def test_single_slot_batches_equal_streaming_sarsa():
    cfg = PolicyConfig(seed=6)
    res = run_encrypted_training(chain_mdp(), cfg, 1, 200, PlaintextSession())
    ref = run_sarsa(chain_mdp(), cfg, 200)
    assert np.allclose(res.q.values, ref.q.values, rtol=0, atol=1e-12)


def test_batch_size_validation(small, small_keys, rng):
    with pytest.raises(ValueError):
        run_encrypted_training(chain_mdp(), PolicyConfig(), small.slot_count + 1, 1,
                               InProcessCloud(small_keys, small, rng))
    with pytest.raises(ValueError):
        run_encrypted_training(object(), PolicyConfig(), 1, 1, PlaintextSession())


def test_run_outputs(tmp_path, small, small_keys, rng):
    res = run_encrypted_training(chain_mdp(), PolicyConfig(), 32, 2,
                                 InProcessCloud(small_keys, small, rng), out_dir=tmp_path)
    assert res.counter.count_tuple() == (10, 10, 8, 8, 8, 6, 2, 2)
    curve = (tmp_path / "learning_curve.csv").read_text().splitlines()
    assert curve[0].startswith("batch,steps") and len(curve) == 3
    assert (tmp_path / "op_report.tsv").exists() and (tmp_path / "precision.tsv").exists()
