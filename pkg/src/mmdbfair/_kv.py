"""Line-oriented ``key = value`` config files."""


class ConfigError(ValueError):
    pass


def parse_kv(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment. Returns an ordered dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key or not key.replace("_", "").replace("-", "").isalnum():
            raise ConfigError(f"{source}:{lineno}: invalid key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_kv(path):
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), str(path))


def split_list(value, sep=","):
    return [v.strip() for v in value.split(sep) if v.strip()]
