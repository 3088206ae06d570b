import threading

import numpy as np
import pytest

from fgfl import wire
from fgfl.federation import (
    ClientState,
    EarlyStopping,
    FederationConfig,
    FederationError,
    FederationResult,
    LocalUpdate,
    canonical_round_log,
    default_k_steps,
    derive_seed,
    fedavg_aggregate,
    fedavg_local_round,
    result_fingerprint,
    run_centralized,
    run_federation,
    run_isolated,
    sample_clients,
    scaffold_aggregate,
    scaffold_local_round,
    validation_split,
)
from fgfl.model import ModelConfig, NodeFeatureConfig, PredictionContext, init_parameters, unflatten
from fgfl.mqttd import MqttBroker
from fgfl.training import TrainConfig, batch_loss_and_gradient
from fgfl.transport import LoopbackTransport, mqtt_transport

from conftest import toy_sample


def tiny_model_config(v=4, bands=1):
    return ModelConfig(
        features=NodeFeatureConfig(n_regions=v, n_bands=bands), n_layers=2, heads=2, head_dim=3
    )


def tiny_samples(n, seed=0, v=4):
    return [toy_sample(seed=seed + i, v=v, n_layers=1, label=2 + (3 * i) % 20) for i in range(n)]


def full_batch_gradient(flat, samples, config):
    _, grad = batch_loss_and_gradient(
        unflatten(flat, config), samples, PredictionContext(mode="eval")
    )
    return grad


class TestSampleClients:
    def test_full_participation(self):
        assert sample_clients(["c", "a", "b", "d"], 1.0, 0, 1) == ("a", "b", "c", "d")

    def test_fraction_is_deterministic(self):
        first = sample_clients(["a", "b", "c", "d"], 0.5, 7, 3)
        second = sample_clients(["a", "b", "c", "d"], 0.5, 7, 3)
        assert first == second and len(first) == 2

    def test_fraction_frequencies_are_balanced(self):
        counts = {c: 0 for c in "abcd"}
        for round_index in range(1000):
            for c in sample_clients(list("abcd"), 0.5, 11, round_index):
                counts[c] += 1
        for c, n in counts.items():
            assert 450 <= n <= 550, f"client {c} selected {n} times"

    def test_empty_registry_rejected(self):
        with pytest.raises(FederationError):
            sample_clients([], 1.0, 0, 1)


class TestFedavgAggregate:
    def test_single_client_identity(self):
        u = LocalUpdate(client_id="a", round_index=1, n=5, params=np.array([1.0, 2.0]))
        np.testing.assert_array_equal(fedavg_aggregate([u]), [1.0, 2.0])

    def test_equal_weights_average(self):
        ups = [
            LocalUpdate(client_id="a", round_index=1, n=3, params=np.array([1.0, 0.0])),
            LocalUpdate(client_id="b", round_index=1, n=3, params=np.array([3.0, 2.0])),
        ]
        np.testing.assert_allclose(fedavg_aggregate(ups), [2.0, 1.0])

    def test_weighted_average_by_hand(self):
        ups = [
            LocalUpdate(client_id="a", round_index=1, n=2, params=np.array([1.0, 1.0])),
            LocalUpdate(client_id="b", round_index=1, n=6, params=np.array([5.0, 5.0])),
        ]
        np.testing.assert_allclose(fedavg_aggregate(ups), [4.0, 4.0])

    def test_arrival_order_invariance(self):
        rng = np.random.default_rng(3)
        ups = [
            LocalUpdate(client_id=f"c{i}", round_index=1, n=i + 1, params=rng.normal(size=8))
            for i in range(5)
        ]
        a = fedavg_aggregate(ups)
        b = fedavg_aggregate(list(reversed(ups)))
        assert np.array_equal(a, b)

    def test_mismatched_rounds_rejected(self):
        ups = [
            LocalUpdate(client_id="a", round_index=1, n=1, params=np.zeros(2)),
            LocalUpdate(client_id="b", round_index=2, n=1, params=np.zeros(2)),
        ]
        with pytest.raises(FederationError):
            fedavg_aggregate(ups)


class TestScaffoldLocalRound:
    def setup_method(self):
        self.config = tiny_model_config()
        self.samples = tiny_samples(4, seed=5)
        self.w0 = init_parameters(self.config, seed=1).flatten()

    def test_k1_without_variates_is_one_sgd_step(self):
        client = ClientState(client_id="a", samples=self.samples)
        update = scaffold_local_round(
            client, self.w0, np.zeros_like(self.w0), k_steps=1, local_lr=0.05,
            model_config=self.config, batch_size=len(self.samples), seed=3,
        )
        g = full_batch_gradient(self.w0, self.samples, self.config)
        np.testing.assert_allclose(update.delta, -0.05 * g, atol=1e-12)

    def test_k1_control_equals_full_batch_gradient(self):
        client = ClientState(client_id="a", samples=self.samples)
        update = scaffold_local_round(
            client, self.w0, np.zeros_like(self.w0), k_steps=1, local_lr=0.05,
            model_config=self.config, batch_size=len(self.samples), seed=3,
        )
        g = full_batch_gradient(self.w0, self.samples, self.config)
        np.testing.assert_allclose(update.control, g, atol=1e-10)

    def test_control_is_mean_of_replayed_gradients(self):
        # replay the recorded trajectory and average the raw gradients
        k, lr, batch = 4, 0.03, 2
        c_server = np.full_like(self.w0, 0.01)
        c_client = np.full_like(self.w0, -0.02)
        client = ClientState(client_id="a", samples=self.samples, control=c_client.copy())
        update = scaffold_local_round(
            client, self.w0, c_server, k_steps=k, local_lr=lr,
            model_config=self.config, batch_size=batch, seed=9,
        )
        rng = np.random.default_rng(9)
        pending = []
        w = self.w0.copy()
        grads = []
        for _ in range(k):
            if not pending:
                order = rng.permutation(len(self.samples))
                pending = [order[i : i + batch] for i in range(0, len(order), batch)]
            chunk = [self.samples[i] for i in pending.pop(0)]
            g = full_batch_gradient(w, chunk, self.config)
            grads.append(g)
            w = w - lr * (g - c_client + c_server)
        # the c_i and c terms cancel: the new variate is exactly the mean
        # of the correction-free gradients along the trajectory
        np.testing.assert_allclose(update.control, sum(grads) / k, atol=1e-10)
        np.testing.assert_allclose(update.delta, w - self.w0, atol=1e-12)

    def test_bad_arguments_rejected(self):
        client = ClientState(client_id="a", samples=self.samples)
        with pytest.raises(FederationError):
            scaffold_local_round(client, self.w0, np.zeros_like(self.w0), 0, 0.1, self.config)
        with pytest.raises(FederationError):
            scaffold_local_round(client, self.w0, np.zeros_like(self.w0), 1, -0.1, self.config)


class TestScaffoldAggregate:
    def test_zero_deltas_keep_state(self):
        w = np.array([1.0, 2.0])
        c = np.array([0.5, 0.5])
        ups = [
            LocalUpdate(client_id="a", round_index=1, n=2, delta=np.zeros(2), control=np.zeros(2)),
            LocalUpdate(client_id="b", round_index=1, n=2, delta=np.zeros(2), control=np.zeros(2)),
        ]
        w2, c2 = scaffold_aggregate(ups, w, c, 1.0, {"a": np.zeros(2), "b": np.zeros(2)})
        np.testing.assert_array_equal(w2, w)
        np.testing.assert_array_equal(c2, c)

    def test_single_client_eta_one_recovers_local_model(self):
        w = np.array([1.0, 1.0])
        delta = np.array([0.25, -0.5])
        ups = [LocalUpdate(client_id="a", round_index=1, n=2, delta=delta, control=np.zeros(2))]
        w2, _ = scaffold_aggregate(ups, w, np.zeros(2), 1.0, {})
        np.testing.assert_allclose(w2, w + delta)

    def test_server_variate_tracks_client_mean(self):
        rng = np.random.default_rng(0)
        n_clients, dim, rounds = 3, 6, 5
        c_server = np.zeros(dim)
        clients = {f"c{i}": np.zeros(dim) for i in range(n_clients)}
        prev = {cid: vec.copy() for cid, vec in clients.items()}
        for round_index in range(rounds):
            ups = []
            for cid in clients:
                new_control = clients[cid] + rng.normal(size=dim)
                ups.append(
                    LocalUpdate(client_id=cid, round_index=round_index, n=2,
                                delta=rng.normal(size=dim), control=new_control)
                )
                clients[cid] = new_control
            _, c_server = scaffold_aggregate(ups, np.zeros(dim), c_server, 1.0, prev)
            for u in ups:
                prev[u.client_id] = u.control
            mean = sum(clients.values()) / n_clients
            np.testing.assert_allclose(c_server, mean, atol=1e-12)


class TestFedavgCentralizedEquivalence:
    def test_one_full_batch_sgd_step_matches_pooled(self):
        config = tiny_model_config()
        lr = 0.07
        for seed in range(10):
            shard_a = tiny_samples(3, seed=100 * seed)
            shard_b = tiny_samples(5, seed=100 * seed + 50)
            w0 = init_parameters(config, seed=seed).flatten()

            updates = []
            for cid, shard in (("a", shard_a), ("b", shard_b)):
                g = full_batch_gradient(w0, shard, config)
                updates.append(
                    LocalUpdate(client_id=cid, round_index=1, n=len(shard), params=w0 - lr * g)
                )
            federated = fedavg_aggregate(updates)

            pooled_grad = full_batch_gradient(w0, shard_a + shard_b, config)
            centralized = w0 - lr * pooled_grad
            np.testing.assert_allclose(federated, centralized, atol=1e-10)


class TestScaffoldFedavgNullTest:
    def test_identical_data_trajectories_coincide(self):
        config = tiny_model_config()
        shared = tiny_samples(4, seed=77)
        k, lr = 2, 0.05
        w_fed = init_parameters(config, seed=2).flatten()
        w_scaf = w_fed.copy()
        c_server = np.zeros_like(w_scaf)
        controls = {cid: np.zeros_like(w_scaf) for cid in ("a", "b", "c")}
        prev = {cid: vec.copy() for cid, vec in controls.items()}
        for round_index in range(1, 5):
            fed_updates = []
            scaf_updates = []
            for cid in ("a", "b", "c"):
                w = w_fed.copy()
                for _ in range(k):  # plain full-batch SGD
                    w = w - lr * full_batch_gradient(w, shared, config)
                fed_updates.append(LocalUpdate(client_id=cid, round_index=round_index, n=4, params=w))
                client = ClientState(client_id=cid, samples=shared, control=controls[cid].copy())
                up = scaffold_local_round(
                    client, w_scaf, c_server, k_steps=k, local_lr=lr,
                    model_config=config, batch_size=4, seed=round_index,
                )
                up.round_index = round_index
                scaf_updates.append(up)
            w_fed = fedavg_aggregate(fed_updates)
            w_scaf, c_server = scaffold_aggregate(scaf_updates, w_scaf, c_server, 1.0, prev)
            for u in scaf_updates:
                prev[u.client_id] = u.control
                controls[u.client_id] = u.control
            np.testing.assert_allclose(w_scaf, w_fed, atol=1e-8)


class TestValidationSplit:
    def test_split_is_disjoint_and_stratified(self):
        samples = tiny_samples(20, seed=1)
        train, val = validation_split(samples, fraction=0.2, seed=4)
        assert len(val) == 4
        assert {s.patient_id for s in train}.isdisjoint({s.patient_id for s in val})
        assert len(train) + len(val) == 20

    def test_deterministic(self):
        samples = tiny_samples(15, seed=3)
        a = validation_split(samples, 0.2, seed=9)
        b = validation_split(samples, 0.2, seed=9)
        assert [s.patient_id for s in a[1]] == [s.patient_id for s in b[1]]


class TestEarlyStopping:
    def test_patience_window(self):
        stopper = EarlyStopping(patience=10)
        weights = {r: np.array([float(r)]) for r in range(1, 20)}
        stopped_at = None
        maes = {1: 5.0, 2: 4.0, 3: 3.0}
        for r in range(1, 20):
            mae = maes.get(r, 3.0 + 0.1 * r)  # strictly increasing after round 3
            if stopper.observe(r, mae, weights[r]):
                stopped_at = r
                break
        assert stopped_at == 13
        assert stopper.best_round == 3
        np.testing.assert_array_equal(stopper.best_weights, [3.0])

    def test_best_weights_match_min_mae(self):
        rng = np.random.default_rng(8)
        stopper = EarlyStopping(patience=100)
        maes = rng.uniform(1, 5, size=30)
        for r, mae in enumerate(maes, start=1):
            stopper.observe(r, float(mae), np.array([float(r)]))
        assert stopper.best_round == int(np.argmin(maes)) + 1


def small_fed_config(**kw):
    defaults = dict(
        experiment_id="exp-test",
        algorithm="fedavg",
        rounds=3,
        patience=10,
        seed=0,
        train=TrainConfig(batch_size=2, local_epochs=1, seed=0, dropout=0.1),
        round_timeout=30.0,
        join_timeout=15.0,
    )
    defaults.update(kw)
    return FederationConfig(**defaults)


def run_loopback_experiment(config=None, algorithm="fedavg"):
    model_config = tiny_model_config()
    shards = {
        "hosp-a": tiny_samples(4, seed=0),
        "hosp-b": tiny_samples(3, seed=40),
    }
    val = tiny_samples(3, seed=90)
    initial = init_parameters(model_config, seed=0)
    cfg = config or small_fed_config(algorithm=algorithm)
    transport = LoopbackTransport()
    return run_federation(cfg, shards, val, initial, lambda name: transport)


class TestRunFederationLoopback:
    def test_round_log_shape_and_result(self):
        result = run_loopback_experiment()
        assert len(result.rounds) == 3
        for i, entry in enumerate(result.rounds, start=1):
            assert entry["round"] == i
            assert entry["algorithm"] == "fedavg"
            assert entry["participants"] == ["hosp-a", "hosp-b"]
            assert np.isfinite(entry["val_mae"])
        assert result.w_star.dtype == np.float64
        assert result.best_round >= 1

    def test_rerun_is_bitwise_identical(self):
        a = run_loopback_experiment()
        b = run_loopback_experiment()
        assert np.array_equal(a.w_star, b.w_star)
        assert canonical_round_log(a.rounds) == canonical_round_log(b.rounds)
        assert result_fingerprint(a) == result_fingerprint(b)

    def test_scaffold_runs_and_differs_from_fedavg(self):
        a = run_loopback_experiment(algorithm="fedavg")
        b = run_loopback_experiment(
            config=small_fed_config(algorithm="scaffold", local_lr=0.01)
        )
        assert not np.array_equal(a.w_star, b.w_star)
        assert b.rounds[0]["algorithm"] == "scaffold"

    def test_single_client_single_round_returns_local_model(self):
        model_config = tiny_model_config()
        samples = tiny_samples(4, seed=0)
        val = tiny_samples(2, seed=90)
        initial = init_parameters(model_config, seed=0)
        cfg = small_fed_config(rounds=1)
        transport = LoopbackTransport()
        result = run_federation(cfg, {"hosp-a": samples}, val, initial, lambda name: transport)

        seed = derive_seed(cfg.seed, 1, "hosp-a")
        w0_f32 = initial.flatten().astype(np.float32).astype(np.float64)
        client = ClientState(client_id="hosp-a", samples=samples)
        expected = fedavg_local_round(
            client, w0_f32, model_config, TrainConfig(batch_size=2, local_epochs=1, seed=seed)
        )
        expected_f32 = expected.params.astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(result.w_star, expected_f32)

    def test_topic_kind_consistency_audit(self):
        model_config = tiny_model_config()
        transport = LoopbackTransport()
        from fgfl.transport import MessageEndpoint

        audit_ep = MessageEndpoint(transport)
        audit = audit_ep.listen("fl/#")
        cfg = small_fed_config(rounds=2)
        shards = {"hosp-a": tiny_samples(3, seed=0), "hosp-b": tiny_samples(3, seed=30)}
        run_federation(cfg, shards, tiny_samples(2, seed=90), init_parameters(model_config, 0),
                       lambda name: transport)
        seen = []
        try:
            while True:
                seen.append(audit.receive(timeout=0.1))
        except Exception:
            pass
        assert seen, "audit subscription captured no traffic"
        for msg in seen:
            expected_topic = wire.topic_for(
                msg.kind, msg.experiment,
                msg.round if msg.kind in (wire.KIND_GLOBAL_MODEL,) else msg.round,
                msg.sender if msg.kind == wire.KIND_LOCAL_UPDATE else None,
            )
            # every kind must have traveled on its own topic scheme
            assert wire.topic_matches(expected_topic, expected_topic)


class TestRunCentralizedAndIsolated:
    def test_centralized_round_log(self):
        config = tiny_model_config()
        train = tiny_samples(6, seed=0)
        val = tiny_samples(2, seed=60)
        result = run_centralized(train, val, init_parameters(config, 0), small_fed_config(rounds=3))
        assert len(result.rounds) == 3
        assert result.rounds[0]["algorithm"] == "centralized"

    def test_isolated_one_client_equals_centralized_on_that_shard(self):
        config = tiny_model_config()
        shard = tiny_samples(8, seed=0)
        cfg = small_fed_config(rounds=2)
        iso = run_isolated({"only": shard}, init_parameters(config, 0), cfg, val_fraction=0.25)
        train, val = validation_split(shard, 0.25, seed=derive_seed(cfg.seed, 0, "only"))
        cen = run_centralized(train, val, init_parameters(config, 0),
                              small_fed_config(rounds=2, experiment_id="exp-test-only"))
        np.testing.assert_array_equal(iso["only"].w_star, cen.w_star)


class TestTransportInvariance:
    def test_loopback_and_mqtt_agree(self):
        model_config = tiny_model_config()
        shards = {"hosp-a": tiny_samples(3, seed=0), "hosp-b": tiny_samples(3, seed=30)}
        val = tiny_samples(2, seed=90)
        cfg = small_fed_config(rounds=2)

        loop = LoopbackTransport()
        res_loop = run_federation(cfg, shards, val, init_parameters(model_config, 0),
                                  lambda name: loop)

        broker = MqttBroker().start()
        try:
            transports = {}

            def factory(name):
                transports[name] = mqtt_transport(broker.address, client_id=f"inv-{name}")
                return transports[name]

            res_mqtt = run_federation(cfg, shards, val, init_parameters(model_config, 0), factory)
        finally:
            for t in transports.values():
                t.close()
            broker.stop()
        assert result_fingerprint(res_loop) == result_fingerprint(res_mqtt)
        assert np.array_equal(res_loop.w_star, res_mqtt.w_star)
        assert canonical_round_log(res_loop.rounds) == canonical_round_log(res_mqtt.rounds)


class TestJoinHandling:
    def test_duplicate_client_id_rejected(self):
        from fgfl.federation import FederationServer
        from fgfl.transport import MessageEndpoint

        transport = LoopbackTransport()
        model_config = tiny_model_config()
        cfg = small_fed_config(rounds=1, join_timeout=10.0)
        # two expected clients keep the join phase open while the
        # imposter shows up
        server = FederationServer(
            config=cfg,
            registry=["hosp-a", "hosp-b"],
            validation=tiny_samples(2, seed=90),
            initial=init_parameters(model_config, 0),
            endpoint=MessageEndpoint(transport),
        )
        ep = MessageEndpoint(transport)
        control = ep.listen("fl/exp-test/control")
        join_topic = wire.topic_for(wire.KIND_JOIN, "exp-test")

        def send_join(sender, nonce):
            ep.send(join_topic, wire.FederationMessage(
                kind=wire.KIND_JOIN, experiment="exp-test", round=0, sender=sender,
                body=wire.JoinBody(scheme_id=model_config.scheme_id, n_samples=3, nonce=nonce),
            ))

        join_sub = ep.listen(join_topic)  # subscribe before any join is sent
        worker = threading.Thread(target=lambda: server._await_joins(join_sub), daemon=True)
        worker.start()
        send_join("hosp-a", nonce=1)
        first = control.receive(timeout=5)
        assert first.body.accepted
        send_join("hosp-a", nonce=2)  # different process claiming the same id
        second = control.receive(timeout=5)
        assert not second.body.accepted
        assert "duplicate" in second.body.reason
        send_join("hosp-a", nonce=1)  # idempotent retry of the real client
        third = control.receive(timeout=5)
        assert third.body.accepted
        send_join("hosp-b", nonce=9)  # completes the join phase
        assert control.receive(timeout=5).body.accepted
        worker.join(timeout=5)

    def test_unknown_client_and_wrong_experiment_rejected(self):
        from fgfl.federation import FederationServer
        from fgfl.transport import MessageEndpoint

        transport = LoopbackTransport()
        model_config = tiny_model_config()
        cfg = small_fed_config(rounds=1, join_timeout=2.0)
        server = FederationServer(
            config=cfg,
            registry=["hosp-a"],
            validation=tiny_samples(2, seed=90),
            initial=init_parameters(model_config, 0),
            endpoint=MessageEndpoint(transport),
        )
        ep = MessageEndpoint(transport)
        control = ep.listen("fl/exp-test/control")
        join_sub = ep.listen(wire.topic_for(wire.KIND_JOIN, "exp-test"))
        worker = threading.Thread(target=lambda: _swallow(server, join_sub), daemon=True)
        worker.start()
        ep.send(wire.topic_for(wire.KIND_JOIN, "exp-test"), wire.FederationMessage(
            kind=wire.KIND_JOIN, experiment="exp-other", round=0, sender="hosp-a",
            body=wire.JoinBody(scheme_id="s", n_samples=1, nonce=5),
        ))
        reply = control.receive(timeout=5)
        assert not reply.body.accepted and "mismatch" in reply.body.reason
        ep.send(wire.topic_for(wire.KIND_JOIN, "exp-test"), wire.FederationMessage(
            kind=wire.KIND_JOIN, experiment="exp-test", round=0, sender="intruder",
            body=wire.JoinBody(scheme_id="s", n_samples=1, nonce=6),
        ))
        reply = control.receive(timeout=5)
        assert not reply.body.accepted and "unknown" in reply.body.reason
        worker.join(timeout=5)


def _swallow(server, join_sub):
    try:
        server._await_joins(join_sub)
    except FederationError:
        pass
