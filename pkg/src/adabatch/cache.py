import inspect
import logging
import os
import pickle
from functools import wraps

import fakeredis
import redis

logger = logging.getLogger(__name__)

CACHE_TTL = 7 * 24 * 3600
CACHE = fakeredis.FakeRedis()
SEPARATOR = '::'


def setup_cache(default_ttl: int = None, redis_connection: redis.Redis | str = None, separator: str = None):
    global CACHE_TTL
    global CACHE
    global SEPARATOR
    if default_ttl is not None:
        CACHE_TTL = default_ttl
    if redis_connection is not None:
        CACHE = redis.Redis.from_url(redis_connection) if isinstance(redis_connection, str) else redis_connection
    if separator is not None:
        SEPARATOR = separator


def setup_cache_from_env():
    """Point the results cache at ``ADABATCH_REDIS_URL`` when it is set."""
    url = os.environ.get('ADABATCH_REDIS_URL')
    if url:
        logger.info("results cache on %s", url)
        setup_cache(redis_connection=url)


def memoize_args(func):
    cache = {}

    @wraps(func)
    def wrapper(*args):
        if args not in cache:
            cache[args] = func(*args)
        return cache[args]

    wrapper.cache = cache
    return wrapper


def _get_attr_value(value, path):
    """
    Walk a dotted attribute chain on `value`.

    Example:  _get_attr_value(data, 'stats.pmin') → data.stats.pmin
    """
    for part in path.split('.'):
        if value is None:
            return None
        value = getattr(value, part)
    return value


def _make_key(bound, attr_paths, separator):
    """
    `bound` is a BoundArguments object (from inspect.signature.bind).
    Return the string used as the hash field.
    """
    parts = []
    for path in attr_paths:
        param, _, rest = path.partition('.')
        val = bound.arguments[param]
        if rest:
            val = _get_attr_value(val, rest)
        parts.append(str(val))
    return separator.join(parts)


def redis_cache(*attr_paths, ttl=None, separator=None):
    """
    Decorator that caches a function's return value in a Redis hash.

    * The hash name is the wrapped function's __name__.
    * Each cache entry is stored under a field that is built from
      the supplied attribute paths.
    """

    def decorator(func):
        sig = inspect.signature(func)
        cache_key = f"{func.__name__}"

        @wraps(func)
        def wrapper(*args, **kwargs):
            bound = sig.bind(*args, **kwargs)
            bound.apply_defaults()

            key = _make_key(bound, attr_paths, separator or SEPARATOR)

            blob = CACHE.hget(cache_key, key)
            if blob is not None:
                logger.debug("cache hit %s %s", cache_key, key)
                return pickle.loads(blob)

            result = func(*args, **kwargs)
            CACHE.hset(cache_key, key, pickle.dumps(result))
            CACHE.expire(cache_key, ttl or CACHE_TTL)
            return result

        def discard_all():
            CACHE.delete(cache_key)

        def discard(*d_args, **d_kwargs):
            bound = sig.bind_partial(*d_args, **d_kwargs)
            try:
                key = _make_key(bound, attr_paths, separator or SEPARATOR)
            except KeyError:
                return discard_all()
            CACHE.hdel(cache_key, key)

        wrapper.discard_all = discard_all
        wrapper.discard = discard

        return wrapper

    return decorator
