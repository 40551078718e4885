"""Test suite for GHQ"""
