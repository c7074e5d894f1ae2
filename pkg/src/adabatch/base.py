from json import dumps, loads


class Snapshot(dict):
    """Attribute-access dictionary holding a configuration snapshot."""

    def __init__(self, data: dict | None = None, **kwargs):
        super().__init__()
        for name, value in {**(data or {}), **kwargs}.items():
            setattr(self, name, value)

    def __getattr__(self, item):
        return self.get(item)

    def __setattr__(self, key, value):
        self[key] = value

    def __delattr__(self, item):
        del self[item]

    def dumps(self) -> str:
        """Serialize the snapshot."""
        return dumps(dict(self), sort_keys=True, default=str)

    @classmethod
    def loads(cls, raw: str | None) -> 'Snapshot':
        """Create a Snapshot object from a JSON string."""
        return cls(loads(raw) if raw else {})

    @classmethod
    def of(cls, config) -> 'Snapshot':
        """Snapshot of a dataclass config (or any object with ``__dict__``)."""
        return cls({k: v for k, v in vars(config).items() if not k.startswith('_')})
