# -*- coding: utf-8 -*-
#
# Configuration file for the Sphinx documentation builder.
#
# This file does only contain a selection of the most common options. For a
# full list see the documentation:
# http://www.sphinx-doc.org/en/master/config

# -- Path setup --------------------------------------------------------------

import os
import sys

sys.path.insert(0, os.path.abspath('.'))
sys.path.insert(0, os.path.abspath('../../'))

import wsidg  # noqa: E402

# -- Project information -----------------------------------------------------

project = 'wsi-domaingen'
copyright = '2026, wsi-domaingen developers'
author = '-'

version = ''
release = wsidg.__version__

# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.napoleon',
    'sphinx.ext.autodoc',
    'sphinx.ext.intersphinx',
    'sphinx.ext.coverage',
    'sphinx.ext.viewcode',
]

# Heavy numeric dependencies are mocked for autodoc.
autodoc_mock_imports = ['torch', 'torchvision', 'skimage', 'sklearn', 'matplotlib']

html_theme_options = dict(
    show_powered_by = False,
    show_related = True,
    fixed_sidebar = True,
)

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'
language = 'en'
exclude_patterns = []
pygments_style = 'sphinx'

# -- Options for HTML output -------------------------------------------------

html_theme = 'alabaster'
html_static_path = []

html_sidebars = {
    'index': [
        'localtoc.html'
    ],
    '**': [
        'localtoc.html',
        'relations.html',
        'searchbox.html'
    ]
}

htmlhelp_basename = 'WSIDGdoc'

# -- Options for manual page output ------------------------------------------

man_pages = [
    (master_doc, 'wsidg', 'wsi-domaingen Documentation',
     [author], 1)
]

intersphinx_mapping = {'python': ('https://docs.python.org/3', None)}

add_module_names = False
