""" A simple log facility for morphoflow """

import logging

logger = logging.getLogger('morphoflow')
