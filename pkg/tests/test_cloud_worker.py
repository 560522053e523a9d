import socket

import numpy as np
import pytest

from client_outsourcer import SocketChannel
from cloud_worker import (
    CloudWorker,
    FaultMode,
    SessionNotFoundError,
    WorkerServer,
    start_pipe_worker,
)
from matrix_core import (
    DimensionError,
    deserialize_matrix,
    inverse_ops,
    mat_mul,
    serialize_matrix,
    transpose,
)
from protocol import (
    ErrorCode,
    Frame,
    Opcode,
    WorkerError,
    decode_error,
    read_frame,
)

M22 = np.array([[1.0, 2.0], [3.0, 4.0]])


def request(worker, opcode, session_id, matrix):
    return worker.handle_frame(Frame(opcode, session_id, serialize_matrix(matrix)))


def error_code(frame):
    assert frame.opcode == Opcode.ERROR
    return decode_error(frame.payload)[0]


class TestGram:
    def test_identity(self, honest_worker):
        assert np.array_equal(honest_worker.handle_gram(1, np.eye(2)), np.eye(2))

    def test_small_matrix(self, honest_worker):
        assert np.array_equal(honest_worker.handle_gram(1, M22), [[10.0, 14.0], [14.0, 20.0]])

    def test_matches_oracle_exactly(self, honest_worker, tall_matrix):
        a = tall_matrix(30, 11)
        assert np.array_equal(honest_worker.handle_gram(5, a), mat_mul(transpose(a), a))

    def test_counts_operations(self, honest_worker, tall_matrix):
        honest_worker.handle_gram(1, tall_matrix(20, 6))
        assert honest_worker.metrics.total_ops(['gram']) == 6 * 20 * 6
        assert honest_worker.get_stats()['gram'] == 1


class TestInvprod:
    def test_identity(self, honest_worker):
        honest_worker.handle_gram(3, np.eye(2))
        assert np.array_equal(honest_worker.handle_invprod(3, np.eye(2)), np.eye(2))

    def test_diagonal(self, honest_worker):
        honest_worker.handle_gram(3, np.eye(2))
        assert np.array_equal(honest_worker.handle_invprod(3, 2.0 * np.eye(2)), 0.5 * np.eye(2))

    def test_uses_cached_matrix(self, honest_worker):
        honest_worker.handle_gram(4, M22)
        np.testing.assert_allclose(honest_worker.handle_invprod(4, np.eye(2)), M22.T)

    def test_missing_session(self, honest_worker):
        with pytest.raises(SessionNotFoundError):
            honest_worker.handle_invprod(99, np.eye(2))

    def test_wrong_shape(self, honest_worker):
        honest_worker.handle_gram(1, np.ones((4, 2)))
        with pytest.raises(DimensionError):
            honest_worker.handle_invprod(1, np.eye(3))

    def test_counts_operations(self, honest_worker, tall_matrix):
        honest_worker.handle_gram(1, tall_matrix(10, 4))
        honest_worker.handle_invprod(1, np.eye(4))
        assert honest_worker.metrics.total_ops(['inverse']) == inverse_ops(4)
        assert honest_worker.metrics.total_ops(['invprod']) == 4 * 4 * 10


class TestFrames:
    def test_round_trip(self, honest_worker):
        response = request(honest_worker, Opcode.GRAM_REQ, 12, M22)
        assert response.opcode == Opcode.GRAM_RESP
        assert response.session_id == 12
        assert np.array_equal(deserialize_matrix(response.payload), [[10.0, 14.0], [14.0, 20.0]])

    def test_no_session(self, honest_worker):
        assert error_code(request(honest_worker, Opcode.INVPROD_REQ, 8, np.eye(2))) is ErrorCode.NO_SESSION

    def test_singular(self, honest_worker):
        request(honest_worker, Opcode.GRAM_REQ, 8, np.eye(2))
        response = request(honest_worker, Opcode.INVPROD_REQ, 8, np.zeros((2, 2)))
        assert error_code(response) is ErrorCode.SINGULAR
        assert response.session_id == 8

    def test_malformed_payload(self, honest_worker):
        response = honest_worker.handle_frame(Frame(Opcode.GRAM_REQ, 1, b'\x01\x02'))
        assert error_code(response) is ErrorCode.MALFORMED

    def test_non_finite_payload(self, honest_worker):
        payload = serialize_matrix(np.eye(2))[:-8] + np.array([np.nan]).tobytes()
        assert error_code(honest_worker.handle_frame(Frame(Opcode.GRAM_REQ, 1, payload))) is ErrorCode.MALFORMED

    def test_response_opcode_is_not_a_request(self, honest_worker):
        response = honest_worker.handle_frame(Frame(Opcode.GRAM_RESP, 1, serialize_matrix(np.eye(2))))
        assert error_code(response) is ErrorCode.BAD_REQUEST

    def test_errors_are_counted(self, honest_worker):
        request(honest_worker, Opcode.INVPROD_REQ, 8, np.eye(2))
        assert honest_worker.get_stats()['errors'] == 1


class TestFaults:
    def test_parse(self):
        assert FaultMode.parse('honest').honest
        assert FaultMode.parse('perturb:1e-6') == FaultMode('perturb', 1e-6)
        assert FaultMode.parse('perturb').epsilon == 1e-3
        assert FaultMode.parse('random_result').kind == 'random'
        assert FaultMode.parse('lazy_identity').kind == 'lazy'
        assert str(FaultMode.parse('perturb:0.5')) == 'perturb:0.5'
        with pytest.raises(ValueError):
            FaultMode.parse('sloppy')
        with pytest.raises(ValueError):
            FaultMode.parse('perturb:lots')

    def test_unknown_target(self):
        with pytest.raises(ValueError):
            CloudWorker(fault_target='everything')

    def test_perturb_hits_both_rounds_by_default(self, tall_matrix):
        a = tall_matrix(12, 5)
        worker = CloudWorker(fault_mode='perturb:1e-3', seed=3)
        assert worker.fault_target == 'both'
        diff = worker.handle_gram(1, a) - mat_mul(transpose(a), a)
        assert np.count_nonzero(diff) == 1
        assert diff[np.nonzero(diff)][0] == pytest.approx(1e-3, rel=1e-9)
        assert np.count_nonzero(worker.handle_invprod(1, np.eye(5)) - transpose(a)) == 1

    def test_perturb_gram_changes_one_entry(self, tall_matrix):
        a = tall_matrix(12, 5)
        worker = CloudWorker(fault_mode='perturb:1e-3', fault_target='gram', seed=3)
        diff = worker.handle_gram(1, a) - mat_mul(transpose(a), a)
        assert np.count_nonzero(diff) == 1
        assert diff[np.nonzero(diff)][0] == pytest.approx(1e-3, rel=1e-9)

    def test_perturb_invprod_leaves_gram_alone(self, tall_matrix):
        a = tall_matrix(12, 5)
        worker = CloudWorker(fault_mode='perturb:1e-3', fault_target='invprod')
        assert np.array_equal(worker.handle_gram(1, a), mat_mul(transpose(a), a))
        r3 = worker.handle_invprod(1, np.eye(5))
        assert np.count_nonzero(r3 - transpose(a)) == 1

    def test_random_keeps_shapes(self, tall_matrix):
        worker = CloudWorker(fault_mode='random')
        a = tall_matrix(9, 4)
        gram = worker.handle_gram(1, a)
        assert gram.shape == (4, 4)
        assert np.all(np.abs(gram) <= 1.0)
        assert worker.handle_invprod(1, np.eye(4)).shape == (4, 9)

    def test_lazy_returns_identity(self, tall_matrix):
        worker = CloudWorker(fault_mode='lazy')
        assert np.array_equal(worker.handle_gram(1, tall_matrix(6, 3)), np.eye(3))
        assert np.array_equal(worker.handle_invprod(1, np.eye(3)), np.eye(3, 6))


def test_least_recently_used_session_is_evicted():
    worker = CloudWorker(max_sessions=2)
    for sid in (1, 2):
        worker.handle_gram(sid, np.eye(2))
    worker.handle_invprod(1, np.eye(2))
    worker.handle_gram(3, np.eye(2))
    assert set(worker.sessions) == {1, 3}
    assert worker.get_stats()['evicted'] == 1
    with pytest.raises(SessionNotFoundError):
        worker.handle_invprod(2, np.eye(2))


class TestSessionTables:
    def test_tables_do_not_share_sessions(self, honest_worker):
        first, second = honest_worker.open_sessions(), honest_worker.open_sessions()
        honest_worker.handle_frame(Frame(Opcode.GRAM_REQ, 7, serialize_matrix(M22)), first)
        assert 7 in first and 7 not in second
        response = honest_worker.handle_frame(Frame(Opcode.INVPROD_REQ, 7, serialize_matrix(np.eye(2))), second)
        assert error_code(response) is ErrorCode.NO_SESSION
        response = honest_worker.handle_frame(Frame(Opcode.INVPROD_REQ, 7, serialize_matrix(np.eye(2))), first)
        assert response.opcode == Opcode.INVPROD_RESP

    def test_empty_table_is_still_used(self, honest_worker):
        table = honest_worker.open_sessions()
        assert len(table) == 0
        honest_worker.handle_gram(3, np.eye(2), table)
        assert 3 in table
        assert 3 not in honest_worker.sessions

    def test_eviction_is_per_table(self):
        worker = CloudWorker(max_sessions=1)
        first, second = worker.open_sessions(), worker.open_sessions()
        worker.handle_gram(1, np.eye(2), first)
        worker.handle_gram(2, np.eye(2), second)
        assert list(first) == [1] and list(second) == [2]
        worker.handle_gram(3, np.eye(2), first)
        assert list(first) == [3]
        assert worker.get_stats()['evicted'] == 1


class TestTransport:
    def test_connections_cannot_reach_each_others_sessions(self, honest_worker):
        server = WorkerServer(honest_worker, port=0)
        server.start()
        try:
            address = f'127.0.0.1:{server.port}'
            with SocketChannel.connect_tcp(address, timeout=10) as owner, \
                    SocketChannel.connect_tcp(address, timeout=10) as intruder:
                owner.gram(21, M22)
                with pytest.raises(WorkerError) as excinfo:
                    intruder.invprod(21, np.eye(2))
                assert excinfo.value.code is ErrorCode.NO_SESSION
                np.testing.assert_allclose(owner.invprod(21, np.eye(2)), M22.T)
        finally:
            server.stop()
        assert honest_worker.get_stats()['connections'] == 2

    def test_bare_host_uses_the_default_port(self, honest_worker):
        server = WorkerServer(honest_worker, port=0)
        server.start()
        try:
            with SocketChannel.connect_tcp('127.0.0.1', default_port=server.port, timeout=10) as channel:
                assert np.array_equal(channel.gram(4, np.eye(2)), np.eye(2))
        finally:
            server.stop()

    def test_tcp_server(self, honest_worker):
        server = WorkerServer(honest_worker, port=0)
        server.start()
        try:
            assert server.running and server.port != 0
            with SocketChannel.connect_tcp(f'127.0.0.1:{server.port}', timeout=10) as channel:
                assert np.array_equal(channel.gram(21, M22), [[10.0, 14.0], [14.0, 20.0]])
                np.testing.assert_allclose(channel.invprod(21, np.eye(2)), M22.T)
        finally:
            server.stop()
        assert not server.running

    def test_pipe_worker_reports_errors(self, honest_worker):
        sock, thread = start_pipe_worker(honest_worker)
        with SocketChannel(sock) as channel:
            with pytest.raises(WorkerError) as excinfo:
                channel.invprod(5, np.eye(2))
            assert excinfo.value.code is ErrorCode.NO_SESSION
        thread.join(timeout=5)
        assert not thread.is_alive()

    def test_garbage_gets_malformed_reply(self, honest_worker):
        sock, thread = start_pipe_worker(honest_worker)
        try:
            sock.sendall(b'XBLS' + bytes(30))
            sock.shutdown(socket.SHUT_WR)
            reply = read_frame(sock.makefile('rb'))
            assert reply.session_id == 0
            assert error_code(reply) is ErrorCode.MALFORMED
        finally:
            sock.close()
        thread.join(timeout=5)
