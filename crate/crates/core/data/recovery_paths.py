# Branch-level recovery dialogues. Each key lists the member status codes;
# every member kind receives the same script and dialogue template.
recovery_paths = {

  # Client request errors (400, 422)
  "400_422": [
    {
      "from": "Assistant",
      "value": (
        "Thoughts: {tool} rejected the request as a client error ({message}). "
        "The payload or its formatting does not match what the endpoint documents.\n\n"
        "Action: Re-read the parameter schema, validate the payload and re-issue the call."
      )
    },
    {"from": "function", "value": "Payload validated against the documented schema."},
    {
      "from": "Assistant",
      "value": (
        "Thoughts: The request still fails validation, so individual values must be wrong.\n\n"
        "Action: Rewrite the arguments using the documented formats and value ranges."
      )
    },
    {"from": "function", "value": "Arguments rewritten."},
    {
      "from": "Assistant",
      "value": "Thoughts: No client-side fix remains. Action: Stop and report the request error."
    },
  ],

  # Authentication and authorization errors (401, 403, 407)
  "401_403_407": [
    {
      "from": "Assistant",
      "value": (
        "Thoughts: {tool} refused the credentials ({message}). "
        "Retrying with the same credentials cannot succeed.\n\n"
        "Action: Stop the task and report which credential or permission is missing."
      )
    },
    {"from": "function", "value": "Failure reported to the user."},
  ],
}
