import pytest

from spiketta import experiment, formats, snn, trainer


@pytest.fixture(scope="session")
def toy_data():
    return trainer.synth_dataset(trainer.SyntheticDatasetSpec(), 0)


@pytest.fixture(scope="session")
def source_model(request, toy_data):
    """Default toy model trained for 20 epochs; cached per source-tree hash."""
    root = request.config.cache.mkdir("spiketta")
    path = root / f"source-{experiment.source_digest()}.snnw"
    if path.is_file():
        params, meta = formats.load_checkpoint(path)
        return params, meta
    train, test = toy_data
    res = trainer.train_source(train, snn.ArchConfig(), snn.LifNeuronConfig(), epochs=20, seed=0, test=test)
    meta = {"train_accuracy": res.train_accuracy, "test_accuracy": res.test_accuracy}
    formats.save_checkpoint(path, res.params, meta)
    return res.params, meta
