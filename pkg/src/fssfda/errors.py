class FssfdaError(Exception):
    pass


class IngestionError(FssfdaError):
    pass


class SplitError(FssfdaError):
    pass


class SamplingError(FssfdaError):
    pass


class ScenarioError(FssfdaError):
    pass


class DataError(FssfdaError):
    pass


class ModelError(FssfdaError):
    pass


class CheckpointError(ModelError):
    pass


class TrainingError(FssfdaError):
    pass


class SelectionError(FssfdaError):
    pass


class AggregationError(FssfdaError):
    pass


class ConfigError(FssfdaError):
    pass
