# %% [markdown]
# Serving recommendations
# =======================
#
# Train a tiny model, start the mock txt2img backend and the recommender in
# this process, then ask for an image. The mock sleeps a thousandth of the
# real per-image time.

# %%
import tempfile
from pathlib import Path

import httpx

from stepsaver import FeatureExtractor, TrainConfig, fit_features, save_model, split, train
from stepsaver.service import BackgroundServer, MockTiming, ServiceConfig, create_app, create_mock_backend
from stepsaver.synthetic import sentinel_corpus

work = Path(tempfile.mkdtemp())
ds = split(sentinel_corpus(1000, seed=2), test_count=0, seed=2)
extractor = fit_features([r.prompt for r in ds.train], FeatureExtractor(hash_dim=1 << 12))
model = train(ds.train, ds.validation, extractor, TrainConfig(epochs=2)).model
save_model(model, extractor, work / "model.bin")

# %%
backend = BackgroundServer(create_mock_backend(MockTiming(scale=0.001)))
with backend:
    config = ServiceConfig(model_path=str(work / "model.bin"), backend_url=backend.url + "/txt2img")
    with BackgroundServer(create_app(config)) as server, httpx.Client(base_url=server.url) as client:
        print(client.get("/healthz").json())
        print(client.post("/v1/recommend", json={"prompt": "alpha a foggy harbour"}).json())
        doc = client.post("/v1/generate", json={"prompt": "a foggy harbour"}).json()
        print("steps used:", doc["steps_used"], "backend us:", doc["backend_latency_micros"])
        doc = client.post("/v1/generate", json={"prompt": "a foggy harbour", "overrides": {"steps": 100}}).json()
        print("with override:", doc["steps_used"])
