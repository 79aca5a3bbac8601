"""Test package for the vitstem project."""
