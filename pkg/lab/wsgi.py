"""
WSGI config for the lab project.

It exposes the WSGI callable as a module-level variable named ``application``.
Only the admin and the read-only runs API are mounted.
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'lab.settings')

application = get_wsgi_application()
