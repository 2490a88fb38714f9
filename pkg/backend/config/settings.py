"""
Django settings for the systole shape-trajectory pipeline.

Process-level settings only. Experiment parameters (kernel, optimizer budgets,
cohort paths) come from the TOML file passed with --config.
"""
from pathlib import Path
import os
import environ

# Initialize environment variables.
env = environ.Env()
BASE_DIR = Path(__file__).resolve().parent.parent
environ.Env.read_env(os.path.join(BASE_DIR, ".env"))

SECRET_KEY = env("SECRET_KEY", default="systole-local-secret-key")
DEBUG = env.bool("DEBUG", default=False)
ALLOWED_HOSTS = env.list("ALLOWED_HOSTS", default=["127.0.0.1", "localhost"])

# Worker pool size for per-subject stages; the --workers flag overrides it.
SYSTOLE_WORKERS = env.int("SYSTOLE_WORKERS", default=os.cpu_count() or 1)

# Intra-op threads for torch. One thread per worker keeps runs reproducible.
SYSTOLE_TORCH_THREADS = env.int("SYSTOLE_TORCH_THREADS", default=1)

# Application definition
INSTALLED_APPS = [
    "django.contrib.contenttypes",
    "django.contrib.auth",
    "rest_framework",
    "geometry",
    "meshes",
    "registration",
    "transport",
    "spline",
    "stats",
    "pipeline",
]

# The pipeline writes flat files only.
DATABASES = {}

# Internationalization
LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = True
USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# Logging
LOG_LEVEL = env("LOG_LEVEL", default="DEBUG" if DEBUG else "INFO")
LOG_DIR = env("LOG_DIR", default=os.path.join(BASE_DIR, "logs"))
os.makedirs(LOG_DIR, exist_ok=True)

SYSTOLE_APPS = ["geometry", "meshes", "registration", "transport", "spline", "stats", "pipeline"]

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{asctime} {levelname} {name} {message}",
            "style": "{",
        },
        "simple": {
            "format": "{levelname} {name}: {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "level": LOG_LEVEL,
            "class": "logging.StreamHandler",
            "formatter": "simple",
        },
        "debug_file": {
            "level": "DEBUG",
            "class": "logging.FileHandler",
            "filename": os.path.join(LOG_DIR, "systole_debug.log"),
            "formatter": "verbose",
        },
        "error_file": {
            "level": "ERROR",
            "class": "logging.FileHandler",
            "filename": os.path.join(LOG_DIR, "systole_errors.log"),
            "formatter": "verbose",
        },
    },
    "loggers": {
        "django": {
            "handlers": ["console", "error_file"],
            "level": "WARNING",
            "propagate": True,
        },
        **{
            app: {
                "handlers": ["console", "debug_file", "error_file"],
                "level": "DEBUG" if DEBUG else LOG_LEVEL,
                "propagate": False,
            }
            for app in SYSTOLE_APPS
        },
    },
}

# Serializers are only used to validate config files and manifests.
REST_FRAMEWORK = {
    "DEFAULT_AUTHENTICATION_CLASSES": [],
    "DEFAULT_PERMISSION_CLASSES": [],
    "UNAUTHENTICATED_USER": None,
}
