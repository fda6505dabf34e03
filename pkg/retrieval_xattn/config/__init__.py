from .settings import RunConfig, load_defaults, parse_config, serialize_config

__all__ = ["RunConfig", "load_defaults", "parse_config", "serialize_config"]
