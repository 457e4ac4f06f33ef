import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'thought_engine.settings')
django.setup()
