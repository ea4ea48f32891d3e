import pytest
from fastapi.testclient import TestClient

from conftest import make_config
from database.checkpoint_store import MetricsWriter
from main import app, get_result_store
from models.schemas import MetricsRecord, ProbeResult


@pytest.fixture
def client(store):
    app.dependency_overrides[get_result_store] = lambda: store
    yield TestClient(app)
    app.dependency_overrides.clear()


@pytest.fixture
def run_id(store):
    config = make_config()
    run_id = store.register(config)
    with MetricsWriter(store.metrics_path(run_id)) as writer:
        for step in range(3):
            writer.append(MetricsRecord(
                run_id=run_id, seed=0, epoch=0, step=step, l_ssl=2.0, l_affine=0.3,
                total_loss=2.3, lr=0.03, wall_clock=0.1 * step,
            ))
    store.append_probe(run_id, ProbeResult(
        run_id=run_id, method="simclr", variant="affine", dataset="synthetic", seed=0, epoch=1,
        checkpoint="epoch_0001.pt", trial_seeds=[0, 1], accuracies=[0.5, 0.6], mean=0.55,
        ci_half_width=0.635, n_trials=2,
    ))
    return run_id


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["status"] == "healthy"


def test_list_runs(client, run_id):
    body = client.get("/runs").json()
    assert body["total"] == 1
    assert body["runs"][0]["id"] == run_id
    assert body["runs"][0]["status"] == "pending"


def test_get_run(client, run_id):
    body = client.get(f"/runs/{run_id}").json()
    assert body["summary"]["variant"] == "affine"
    assert body["config"]["method"] == "simclr"


def test_unknown_run(client):
    response = client.get("/runs/does-not-exist")
    assert response.status_code == 404
    assert response.json()["error_code"] == "HTTP_404"


def test_metrics_limit(client, run_id):
    assert len(client.get(f"/runs/{run_id}/metrics").json()) == 3
    assert [r["step"] for r in client.get(f"/runs/{run_id}/metrics", params={"limit": 2}).json()] == [0, 1]
    assert client.get(f"/runs/{run_id}/metrics", params={"limit": 0}).status_code == 422


def test_probes(client, run_id):
    (result,) = client.get(f"/runs/{run_id}/probes").json()
    assert result["accuracies"] == [0.5, 0.6]


def test_tables(client, run_id):
    tables = client.get("/tables").json()
    assert tables[0]["name"] == "main"
    assert tables[0]["rows"][0]["cells"]["synthetic"]["mean"] == pytest.approx(55.0)


def test_tables_on_an_empty_store(client):
    assert client.get("/tables").json() == []


def test_stats(client, run_id):
    stats = client.get("/stats").json()
    assert stats["total_runs"] == 1
    assert stats["total_probes"] == 1
    assert "uptime" in stats
